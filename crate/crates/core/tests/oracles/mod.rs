//! Independent reference solutions shared by the oracle tests and the
//! acceptance suite.
#![allow(dead_code)]

pub mod cbs;
pub mod detour;
pub mod qp;

#[derive(Debug, Default)]
pub struct Report {
    pub checked: usize,
    pub skipped: usize,
    /// Largest deviation from the oracle.
    pub worst: f64,
    pub failures: Vec<String>,
}

impl Report {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}
