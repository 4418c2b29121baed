#![allow(dead_code)]

use qnppo::{Choice, ControlModel, Layout, Move};

/// Two-state chain 0 ↔ 1: an arrival from 0, a service completion from 1.
/// Cost is the jobcount.
pub struct Toggle {
    layout: Layout,
}

impl Toggle {
    pub fn new() -> Self {
        Self { layout: Layout::new(vec![vec![Choice::Idle, Choice::Serve(0)]]) }
    }
}

impl ControlModel for Toggle {
    fn num_classes(&self) -> usize {
        1
    }

    fn layout(&self) -> &Layout {
        &self.layout
    }

    fn cost(&self, x: &[u32]) -> f64 {
        x[0] as f64
    }

    fn regeneration_state(&self) -> &[u32] {
        &[0]
    }

    fn base_moves(&self, x: &[u32], out: &mut Vec<(Move, f64)>) {
        if x[0] == 0 {
            out.push((Move::Arrive(0), 1.0));
        }
    }

    fn choice_moves(&self, x: &[u32], _station: usize, choice: usize, out: &mut Vec<(Move, f64)>) {
        if choice == 1 && x[0] >= 1 {
            out.push((Move::Depart(0), 1.0));
        }
    }
}
