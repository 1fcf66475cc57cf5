pub mod analyzer;
pub mod hash;
pub mod model;
pub mod peft;
pub mod store;
pub mod tensor;
pub mod trainer;
pub mod typology;
