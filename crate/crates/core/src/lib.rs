pub mod envs;
pub mod fhmm;
pub mod fhmmctl;
pub mod format;
pub mod harness;
pub mod hmm;
pub mod hmmctl;
pub mod klcore;
pub mod linalg;
