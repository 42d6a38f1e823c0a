//! Exhaustive best-first enumeration of slimming action trees, written
//! against the layout alone. Component keys, candidate actions, drops and
//! tie order are all re-derived here.

use efficientformer::arch::{ComponentKey, ComponentKind, Layout};
use efficientformer::latency::{AttnShape, SyntheticCost};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Slot {
    Gone,
    Conv,
    Attn,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct State {
    pub slots: Vec<Slot>,
    pub widths: [usize; 4],
}

/// `("DR" | "MR", path)` or `("WR", stage)`.
pub type Move = (&'static str, usize);

pub struct Problem {
    pub layout: Layout,
    pub importance: Vec<f32>,
    pub cost: SyntheticCost,
    stage_of: Vec<usize>,
}

impl Problem {
    pub fn new(layout: &Layout, importance: Vec<f32>) -> Problem {
        let mut stage_of = Vec::new();
        for (j, &d) in layout.depths.iter().enumerate() {
            stage_of.extend(std::iter::repeat_n(j, d));
        }
        assert_eq!(stage_of.len(), importance.len());
        Problem {
            cost: SyntheticCost::new(AttnShape {
                heads: layout.heads,
                d_qk: layout.d_qk,
                d_v: layout.d_v,
            }),
            layout: layout.clone(),
            importance,
            stage_of,
        }
    }

    /// Stage 3-4 slots start as attention, earlier ones as conv blocks.
    pub fn start(&self) -> State {
        State {
            slots: self.stage_of.iter().map(|&j| if j >= 2 { Slot::Attn } else { Slot::Conv }).collect(),
            widths: self.layout.widths,
        }
    }

    /// Every slot gone and every stage at 16 channels.
    pub fn floor(&self) -> State {
        State {
            slots: vec![Slot::Gone; self.stage_of.len()],
            widths: [16; 4],
        }
    }

    /// Sum over components in execution order: stem, then per stage its
    /// embedding and kept blocks, then the head.
    pub fn latency(&self, s: &State) -> f64 {
        let l = &self.layout;
        let key = |kind, width, resolution, exp| ComponentKey {
            kind,
            width,
            resolution,
            exp,
        };
        let mut t = self.cost.latency(&key(ComponentKind::Stem, l.stem[1], l.resolution, l.stem[0]));
        let mut prev = l.stem[1];
        for j in 0..4 {
            let side = l.resolution / (4 << j);
            let w = s.widths[j];
            if j > 0 {
                t += self.cost.latency(&key(ComponentKind::Embed, w, side, prev));
            }
            for (p, slot) in s.slots.iter().enumerate() {
                if self.stage_of[p] != j {
                    continue;
                }
                match slot {
                    Slot::Conv => t += self.cost.latency(&key(ComponentKind::Mb4d, w, side, l.exp)),
                    Slot::Attn => t += self.cost.latency(&key(ComponentKind::Mb3d, w, side, l.exp)),
                    Slot::Gone => {}
                }
            }
            prev = w;
        }
        t + self.cost.latency(&key(ComponentKind::Head, prev, l.resolution / 32, l.classes))
    }

    fn kept_sum(&self, s: &State, j: usize) -> f32 {
        let mut acc = 0.0f32;
        for p in 0..s.slots.len() {
            if self.stage_of[p] == j && s.slots[p] != Slot::Gone {
                acc += self.importance[p];
            }
        }
        acc
    }

    /// The candidate moves: remove the least important kept slot, convert
    /// the first attention slot, narrow the stage with the smallest kept
    /// importance among those at 32 channels or more. Ties go to the lowest index.
    pub fn moves(&self, s: &State) -> Vec<Move> {
        let mut out = Vec::new();
        let mut best: Option<usize> = None;
        for p in 0..s.slots.len() {
            if s.slots[p] != Slot::Gone && best.is_none_or(|b| self.importance[p] < self.importance[b]) {
                best = Some(p);
            }
        }
        if let Some(p) = best {
            out.push(("DR", p));
        }
        if let Some(p) = s.slots.iter().position(|&x| x == Slot::Attn) {
            out.push(("MR", p));
        }
        let mut best: Option<(usize, f32)> = None;
        for j in 0..4 {
            if s.widths[j] < 32 {
                continue;
            }
            let v = self.kept_sum(s, j);
            if best.is_none_or(|(_, b)| v < b) {
                best = Some((j, v));
            }
        }
        if let Some((j, _)) = best {
            out.push(("WR", j));
        }
        out
    }

    pub fn apply(&self, s: &State, m: Move) -> State {
        let mut n = s.clone();
        match m {
            ("DR", p) => n.slots[p] = Slot::Gone,
            ("MR", p) => n.slots[p] = Slot::Conv,
            ("WR", j) => n.widths[j] -= 16,
            _ => unreachable!(),
        }
        n
    }

    pub fn drop(&self, s: &State, m: Move) -> f64 {
        match m {
            ("DR", p) => self.importance[p] as f64,
            ("MR", p) => 0.5 * self.importance[p] as f64,
            ("WR", j) => self.kept_sum(s, j) as f64 * 16.0 / s.widths[j] as f64,
            _ => unreachable!(),
        }
    }

    fn rank(&self, m: Move) -> (usize, usize, u8) {
        let pos = |p: usize| {
            let st = self.stage_of[p];
            (st, p - self.stage_of.iter().position(|&x| x == st).unwrap())
        };
        match m {
            ("DR", p) => (pos(p).0, pos(p).1, 0),
            ("MR", p) => (pos(p).0, pos(p).1, 1),
            (_, j) => (j, 0, 2),
        }
    }
}

/// A node of the fully expanded tree.
pub struct Node {
    pub state: State,
    pub latency: f64,
    /// `(move, score, child)`; score is `None` when the move saves nothing.
    pub children: Vec<(Move, Option<f64>, Node)>,
}

/// Expands every move sequence of length up to `depth`.
pub fn expand(p: &Problem, s: State, depth: usize) -> Node {
    let latency = p.latency(&s);
    let mut children = Vec::new();
    if depth > 0 {
        for m in p.moves(&s) {
            let next = p.apply(&s, m);
            let child = expand(p, next, depth - 1);
            let saved = latency - child.latency;
            let score = (saved > 0.0).then(|| p.drop(&s, m) / (saved * 1e3));
            children.push((m, score, child));
        }
    }
    Node { state: s, latency, children }
}

/// Path through the tree taking the lowest score (then the earliest rank)
/// at each level, stopping once the latency is within `target`.
pub fn best_first(p: &Problem, root: &Node, target: f64) -> Vec<Move> {
    let mut out = Vec::new();
    let mut node = root;
    while node.latency > target {
        let mut best: Option<&(Move, Option<f64>, Node)> = None;
        for c in &node.children {
            let Some(sc) = c.1 else { continue };
            let better = match best {
                None => true,
                Some(b) => {
                    let bs = b.1.unwrap();
                    sc < bs || (sc == bs && p.rank(c.0) < p.rank(b.0))
                }
            };
            if better {
                best = Some(c);
            }
        }
        let Some(b) = best else { break };
        out.push(b.0);
        node = &b.2;
    }
    out
}

pub fn node_count(n: &Node) -> usize {
    1 + n.children.iter().map(|c| node_count(&c.2)).sum::<usize>()
}
