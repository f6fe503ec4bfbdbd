use serde::{Deserialize, Serialize};

use super::Transition;

/// Communicating-class structure of a transition graph.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErgodicityReport {
    pub ergodic: bool,
    /// Closed communicating classes, each sorted, ordered by smallest member.
    pub recurrent_classes: Vec<Vec<usize>>,
    /// States outside every closed class.
    pub transient: Vec<usize>,
    /// States excluded by the mask.
    pub excluded: Vec<usize>,
}

/// True iff the graph of nonzero transitions has exactly one closed
/// communicating class.
pub fn check_ergodic(transition: &Transition) -> ErgodicityReport {
    check_ergodic_masked(transition, None)
}

/// As [`check_ergodic`], but states with `mask[i] == true` are removed from
/// the graph together with all edges into them.
pub fn check_ergodic_masked(transition: &Transition, mask: Option<&[bool]>) -> ErgodicityReport {
    let n = transition.n_states();
    let removed = |i: usize| mask.is_some_and(|m| m[i]);
    let adj: Vec<Vec<usize>> = (0..n)
        .map(|i| {
            if removed(i) {
                Vec::new()
            } else {
                transition.row(i).into_iter().filter(|&(j, v)| v > 0.0 && !removed(j)).map(|(j, _)| j).collect()
            }
        })
        .collect();
    let comp = tarjan_scc(&adj, |i| !removed(i));
    let n_comp = comp.iter().filter_map(|c| *c).max().map_or(0, |m| m + 1);
    let mut closed = vec![true; n_comp];
    for i in 0..n {
        if let Some(ci) = comp[i] {
            for &j in &adj[i] {
                if comp[j] != Some(ci) {
                    closed[ci] = false;
                }
            }
        }
    }
    let mut classes: Vec<Vec<usize>> = vec![Vec::new(); n_comp];
    let mut transient = Vec::new();
    let mut excluded = Vec::new();
    for i in 0..n {
        match comp[i] {
            Some(c) if closed[c] => classes[c].push(i),
            Some(_) => transient.push(i),
            None => excluded.push(i),
        }
    }
    let mut recurrent_classes: Vec<Vec<usize>> = classes.into_iter().filter(|c| !c.is_empty()).collect();
    recurrent_classes.sort_by_key(|c| c[0]);
    ErgodicityReport { ergodic: recurrent_classes.len() == 1, recurrent_classes, transient, excluded }
}

/// Iterative Tarjan strongly-connected components. Returns a component id
/// per node (`None` for inactive nodes).
fn tarjan_scc(adj: &[Vec<usize>], active: impl Fn(usize) -> bool) -> Vec<Option<usize>> {
    let n = adj.len();
    let mut index = vec![usize::MAX; n];
    let mut low = vec![0usize; n];
    let mut on_stack = vec![false; n];
    let mut stack = Vec::new();
    let mut comp = vec![None; n];
    let mut next_index = 0;
    let mut next_comp = 0;
    let mut call: Vec<(usize, usize)> = Vec::new();
    for root in 0..n {
        if !active(root) || index[root] != usize::MAX {
            continue;
        }
        call.push((root, 0));
        index[root] = next_index;
        low[root] = next_index;
        next_index += 1;
        stack.push(root);
        on_stack[root] = true;
        while let Some(&mut (v, ref mut edge)) = call.last_mut() {
            if *edge < adj[v].len() {
                let w = adj[v][*edge];
                *edge += 1;
                if index[w] == usize::MAX {
                    index[w] = next_index;
                    low[w] = next_index;
                    next_index += 1;
                    stack.push(w);
                    on_stack[w] = true;
                    call.push((w, 0));
                } else if on_stack[w] {
                    low[v] = low[v].min(index[w]);
                }
            } else {
                call.pop();
                if let Some(&(parent, _)) = call.last() {
                    low[parent] = low[parent].min(low[v]);
                }
                if low[v] == index[v] {
                    loop {
                        let w = stack.pop().expect("tarjan stack");
                        on_stack[w] = false;
                        comp[w] = Some(next_comp);
                        if w == v {
                            break;
                        }
                    }
                    next_comp += 1;
                }
            }
        }
    }
    comp
}
