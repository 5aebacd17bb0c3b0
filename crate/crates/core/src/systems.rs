//! Built-in workload systems addressable by id over the wire.

use std::collections::BTreeMap;

use crate::linsolve::LinearSystem;

/// Id of the 5x5 benchmark system.
pub const CANONICAL5: &str = "canonical5";
/// Id of the 2x2 smoke-test system.
pub const SMALL2: &str = "small2";

/// The 5x5 benchmark system and its exact solution
/// `[39/106, 46/53, 11/106, 329/212, -21/212]`.
pub fn canonical5() -> LinearSystem {
    LinearSystem::from_rows(
        &[
            vec![4.0, 1.0, 2.0, 1.0, 1.0],
            vec![3.0, 5.0, 1.0, 1.0, 1.0],
            vec![1.0, 1.0, 3.0, 1.0, 1.0],
            vec![1.0, 1.0, 1.0, 5.0, 1.0],
            vec![1.0, 1.0, 1.0, 1.0, 9.0],
        ],
        vec![4.0, 7.0, 3.0, 9.0, 2.0],
    )
    .and_then(|s| {
        s.with_known_solution(vec![
            39.0 / 106.0,
            46.0 / 53.0,
            11.0 / 106.0,
            329.0 / 212.0,
            -21.0 / 212.0,
        ])
    })
    .expect("built-in system is valid")
}

/// `[[2, 1], [1, 3]] x = [3, 4]`, solution `[1, 1]`.
pub fn small2() -> LinearSystem {
    LinearSystem::from_rows(&[vec![2.0, 1.0], vec![1.0, 3.0]], vec![3.0, 4.0])
        .and_then(|s| s.with_known_solution(vec![1.0, 1.0]))
        .expect("built-in system is valid")
}

#[derive(Debug, Clone)]
pub struct SystemRegistry {
    systems: BTreeMap<String, LinearSystem>,
}

impl SystemRegistry {
    pub fn empty() -> Self {
        Self {
            systems: BTreeMap::new(),
        }
    }

    pub fn builtin() -> Self {
        let mut reg = Self::empty();
        reg.register(CANONICAL5, canonical5());
        reg.register(SMALL2, small2());
        reg
    }

    pub fn register(&mut self, id: impl Into<String>, system: LinearSystem) {
        self.systems.insert(id.into(), system);
    }

    pub fn get(&self, id: &str) -> Option<&LinearSystem> {
        self.systems.get(id)
    }

    pub fn ids(&self) -> Vec<String> {
        self.systems.keys().cloned().collect()
    }
}

impl Default for SystemRegistry {
    fn default() -> Self {
        Self::builtin()
    }
}
