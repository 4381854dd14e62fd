pub mod birnn;
pub mod svm;
