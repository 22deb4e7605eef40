use serde::{Deserialize, Serialize};

use crate::error::{CoclError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassGroup {
    Head,
    Mid,
    Tail,
}

/// Head and tail class sets, each sorted ascending.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct HeadTail {
    pub head: Vec<usize>,
    pub tail: Vec<usize>,
}

impl HeadTail {
    pub fn is_head(&self, class: usize) -> bool {
        self.head.binary_search(&class).is_ok()
    }

    pub fn is_tail(&self, class: usize) -> bool {
        self.tail.binary_search(&class).is_ok()
    }

    pub fn group_of(&self, class: usize) -> ClassGroup {
        if self.is_head(class) {
            ClassGroup::Head
        } else if self.is_tail(class) {
            ClassGroup::Tail
        } else {
            ClassGroup::Mid
        }
    }
}

/// Head: the `⌈head_pct·k⌉` largest classes, ties to the lower index.
/// Tail: the `⌈tail_pct·k⌉` smallest classes, ties to the higher index, so
/// that with equal counts the two sets come from opposite ends.
pub fn designate_head_tail(counts: &[usize], head_pct: f64, tail_pct: f64) -> Result<HeadTail> {
    let k = counts.len();
    if !(0.0..=1.0).contains(&head_pct) || !(0.0..=1.0).contains(&tail_pct) {
        return Err(CoclError::validation("head and tail fractions must lie in [0, 1]"));
    }
    if head_pct + tail_pct > 1.0 + 1e-12 {
        return Err(CoclError::validation("head and tail fractions must sum to at most 1"));
    }
    // the small slack keeps e.g. 0.4·10 from rounding up to 5
    let n_head = ((head_pct * k as f64) - 1e-9).ceil().max(0.0) as usize;
    let n_tail = ((tail_pct * k as f64) - 1e-9).ceil().max(0.0) as usize;

    let mut by_size: Vec<usize> = (0..k).collect();
    by_size.sort_by(|&a, &b| counts[b].cmp(&counts[a]).then(a.cmp(&b)));
    let mut head: Vec<usize> = by_size[..n_head.min(k)].to_vec();

    let mut by_small: Vec<usize> = (0..k).collect();
    by_small.sort_by(|&a, &b| counts[a].cmp(&counts[b]).then(b.cmp(&a)));
    let mut tail: Vec<usize> = by_small[..n_tail.min(k)].to_vec();

    head.sort_unstable();
    tail.sort_unstable();
    if let Some(c) = head.iter().find(|c| tail.binary_search(c).is_ok()) {
        return Err(CoclError::validation(format!("class {c} is both head and tail")));
    }
    Ok(HeadTail { head, tail })
}
