//! Symbolic analysis of quantum-classical protocols against a Dolev-Yao
//! intruder extended with quantum capabilities.

pub mod deduction;
pub mod explorer;
pub mod restrictions;
pub mod terms;
pub mod oracle;
pub mod models;
pub mod protocol;
