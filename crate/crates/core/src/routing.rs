//! Discrete choices made during a forward pass.
//!
//! Crop rectangles and kept-edge sets are piecewise constant in the inputs.
//! A forward pass records them; replaying the record makes a second pass
//! evaluate the same smooth branch, which is what finite-difference checks
//! and the straight-through crop surrogate both need.

use crate::apl::PartitionDecision;
use crate::error::{invalid, Result};
use crate::sparsegraph::SparseBipartiteGraph;

#[derive(Clone, Debug, Default)]
pub struct Routing {
    pub decisions: Vec<PartitionDecision>,
    pub graphs: Vec<SparseBipartiteGraph>,
    replay: bool,
    next_decision: usize,
    next_graph: usize,
}

impl Routing {
    pub fn record() -> Self {
        Self::default()
    }

    /// Replays the choices captured in `recorded`, in the same order.
    pub fn replay(recorded: &Routing) -> Self {
        Self {
            decisions: recorded.decisions.clone(),
            graphs: recorded.graphs.clone(),
            replay: true,
            next_decision: 0,
            next_graph: 0,
        }
    }

    pub fn is_replay(&self) -> bool {
        self.replay
    }

    pub fn decision(
        &mut self,
        make: impl FnOnce() -> Result<PartitionDecision>,
    ) -> Result<PartitionDecision> {
        if self.replay {
            let d = self
                .decisions
                .get(self.next_decision)
                .cloned()
                .ok_or_else(|| invalid("routing", "replay ran out of partition decisions"))?;
            self.next_decision += 1;
            return Ok(d);
        }
        let d = make()?;
        self.decisions.push(d.clone());
        Ok(d)
    }

    pub fn graph(
        &mut self,
        make: impl FnOnce() -> Result<SparseBipartiteGraph>,
    ) -> Result<SparseBipartiteGraph> {
        if self.replay {
            let g = self
                .graphs
                .get(self.next_graph)
                .cloned()
                .ok_or_else(|| invalid("routing", "replay ran out of graphs"))?;
            self.next_graph += 1;
            return Ok(g);
        }
        let g = make()?;
        self.graphs.push(g.clone());
        Ok(g)
    }
}

/// Records routing on the first run and replays it on every later run, for
/// closures that are evaluated repeatedly (finite differences).
#[derive(Debug, Default)]
pub struct ReplayCell(std::cell::RefCell<Option<Routing>>);

impl ReplayCell {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn run<R>(&self, f: impl FnOnce(&mut Routing) -> R) -> R {
        let mut routing = match &*self.0.borrow() {
            Some(r) => Routing::replay(r),
            None => Routing::record(),
        };
        let out = f(&mut routing);
        if !routing.is_replay() {
            *self.0.borrow_mut() = Some(routing);
        }
        out
    }

    pub fn recorded(&self) -> Option<Routing> {
        self.0.borrow().clone()
    }
}
