//! Data-parallel loss and gradient evaluation.
//!
//! Items are split into fixed-size chunks, each evaluated on its own graph,
//! and chunk gradients are summed in chunk order. The chunking does not
//! depend on the thread count, so results are bit-identical however many
//! workers run.

use rayon::prelude::*;

use super::{BoundParams, Policy, Result};
use crate::optim::{accumulate, GradMap};
use crate::tensor::{Graph, Var};

pub const GRAPH_CHUNK: usize = 8;

/// Per-item `(loss, stats)` and the gradient of the summed loss with respect
/// to the policy's trainable parameters.
pub fn batch_gradients<T, S, F>(policy: &Policy, items: &[T], f: F) -> Result<(Vec<(f64, S)>, GradMap)>
where
    T: Sync,
    S: Send,
    F: Fn(&mut Graph, &BoundParams, &T) -> Result<(Var, S)> + Sync,
{
    type Chunk<S> = Result<(Vec<(f64, S)>, GradMap)>;
    let chunks: Vec<Chunk<S>> = items
        .par_chunks(GRAPH_CHUNK)
        .map(|chunk| {
            let mut g = Graph::new();
            let bound = policy.bind(&mut g, true)?;
            let mut total: Option<Var> = None;
            let mut out = Vec::with_capacity(chunk.len());
            for item in chunk {
                let (loss, stats) = f(&mut g, &bound, item)?;
                out.push((g.scalar(loss), stats));
                total = Some(match total {
                    None => loss,
                    Some(acc) => g.add(acc, loss)?,
                });
            }
            let total = total.expect("chunks are non-empty");
            let grads = g.backward(total)?;
            Ok((out, bound.collect_grads(&grads, policy)))
        })
        .collect();
    let mut stats = Vec::with_capacity(items.len());
    let mut grads = GradMap::new();
    for chunk in chunks {
        let (s, g) = chunk?;
        stats.extend(s);
        accumulate(&mut grads, g);
    }
    Ok((stats, grads))
}
