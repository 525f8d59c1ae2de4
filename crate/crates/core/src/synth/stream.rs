//! Task sequences over the world's continual classes.

use serde::{Deserialize, Serialize};

use super::{Modality, World};
use crate::error::{Error, Result};
use crate::numerics::RngStream;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scenario {
    /// One modality per step, modalities interleaved in seeded order.
    Random,
    /// Every subset of one modality before moving to the next.
    Shift,
    /// All modalities at every step.
    Simultaneous,
}

impl std::str::FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(Scenario::Random),
            "shift" => Ok(Scenario::Shift),
            "simultaneous" => Ok(Scenario::Simultaneous),
            _ => Err(Error::config(format!("unknown scenario {s:?}"))),
        }
    }
}

impl std::fmt::Display for Scenario {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Scenario::Random => "random",
            Scenario::Shift => "shift",
            Scenario::Simultaneous => "simultaneous",
        })
    }
}

/// The classes one modality contributes to a task.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskPart {
    pub modality: Modality,
    /// Global class ids.
    pub classes: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Task {
    /// 1-based time step.
    pub step: usize,
    pub parts: Vec<TaskPart>,
}

impl Task {
    pub fn modalities(&self) -> Vec<Modality> {
        self.parts.iter().map(|p| p.modality).collect()
    }

    pub fn part(&self, m: Modality) -> Option<&TaskPart> {
        self.parts.iter().find(|p| p.modality == m)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stream {
    pub scenario: Scenario,
    pub reversed: bool,
    pub tasks: Vec<Task>,
}

/// Split each modality's classes into contiguous blocks of a seeded shuffle
/// and order the blocks by scenario.
pub fn make_stream(world: &World, scenario: Scenario, reversed: bool, seed: u64) -> Result<Stream> {
    let k = world.spec.subsets;
    let root = RngStream::new(seed, "stream");
    let mut subsets = Vec::new();
    for m in Modality::ALL {
        let mut ids = world.cl_classes(m);
        root.derive(format!("split/{m}")).shuffle(&mut ids);
        let size = ids.len() / k;
        subsets.push(ids.chunks(size).map(|c| c.to_vec()).collect::<Vec<_>>());
    }
    let part = |m: Modality, j: usize| TaskPart {
        modality: m,
        classes: subsets[m.index()][j].clone(),
    };
    let mut steps: Vec<Vec<TaskPart>> = match scenario {
        Scenario::Shift => Modality::ALL
            .iter()
            .flat_map(|&m| (0..k).map(move |j| (m, j)))
            .map(|(m, j)| vec![part(m, j)])
            .collect(),
        Scenario::Random => {
            let mut order: Vec<Modality> = Modality::ALL.iter().flat_map(|&m| std::iter::repeat_n(m, k)).collect();
            root.derive("order").shuffle(&mut order);
            let mut seen = [0usize; 4];
            order
                .into_iter()
                .map(|m| {
                    let j = seen[m.index()];
                    seen[m.index()] += 1;
                    vec![part(m, j)]
                })
                .collect()
        }
        Scenario::Simultaneous => (0..k)
            .map(|j| Modality::ALL.iter().map(|&m| part(m, j)).collect())
            .collect(),
    };
    if reversed {
        steps.reverse();
    }
    Ok(Stream {
        scenario,
        reversed,
        tasks: steps
            .into_iter()
            .enumerate()
            .map(|(i, parts)| Task { step: i + 1, parts })
            .collect(),
    })
}
