pub mod nets;
pub mod params;
pub mod tensor;
