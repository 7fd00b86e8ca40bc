//! Blockwise fine-tuning: encoder blocks start frozen and are unfrozen one at a
//! time, last block first, every `t` epochs; each unfreeze decays the learning rate.
//!
//! Parameter groups are recognized by name:
//!
//! | prefix                                   | group                                    |
//! |------------------------------------------|------------------------------------------|
//! | `head.`                                  | classifier ensemble, always trainable    |
//! | `backbone.block.{b}.`                    | encoder block `b` (1-based)              |
//! | `backbone.norm.`                         | final layer norm, unfrozen with block B  |
//! | `backbone.patch_embed.`, `cls_token`, `pos_embed` | stem, trainable only if `train_stem` |

use log::info;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Real;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    /// Epochs between unfreezes (`t`).
    pub epochs_per_unfreeze: usize,
    pub num_blocks: usize,
    pub initial_lr: f64,
    pub lr_decay: f64,
    pub total_epochs: usize,
    /// Keep patch, class and position embeddings trainable for the whole run.
    #[serde(default)]
    pub train_stem: bool,
}

impl ScheduleConfig {
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.epochs_per_unfreeze == 0 {
            out.push("schedule.epochs_per_unfreeze must be at least 1".into());
        }
        if self.num_blocks == 0 {
            out.push("schedule.num_blocks must be at least 1".into());
        }
        if !(self.initial_lr > 0.0 && self.initial_lr.is_finite()) {
            out.push(format!("schedule.initial_lr must be positive, got {}", self.initial_lr));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            out.push(format!("schedule.lr_decay must lie in (0, 1], got {}", self.lr_decay));
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleState {
    /// Next epoch to start (0-based).
    pub epoch: usize,
    /// Highest still-frozen block; 0 once every block is trainable.
    pub next_block: usize,
    pub unfreezes: usize,
    pub current_lr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnfreezeEvent {
    pub epoch: usize,
    pub block: usize,
    pub lr: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Group {
    Head,
    Block(usize),
    FinalNorm,
    Stem,
}

fn classify(name: &str, num_blocks: usize) -> Result<Group> {
    if name.starts_with("head.") {
        return Ok(Group::Head);
    }
    if let Some(rest) = name.strip_prefix("backbone.block.") {
        let idx = rest
            .split('.')
            .next()
            .and_then(|s| s.parse::<usize>().ok())
            .filter(|&b| (1..=num_blocks).contains(&b))
            .ok_or_else(|| Error::Naming(format!("{name:?} has no block index in 1..={num_blocks}")))?;
        return Ok(Group::Block(idx));
    }
    if name.starts_with("backbone.norm.") {
        return Ok(Group::FinalNorm);
    }
    if name.starts_with("backbone.patch_embed.")
        || name == "backbone.cls_token"
        || name == "backbone.pos_embed"
    {
        return Ok(Group::Stem);
    }
    Err(Error::Naming(format!("unrecognized parameter {name:?}")))
}

/// Freezes every encoder block and returns the schedule at epoch 0.
pub fn init<T: Real>(store: &mut ParamStore<T>, config: &ScheduleConfig) -> Result<ScheduleState> {
    let problems = config.problems();
    if !problems.is_empty() {
        return Err(Error::Config(problems));
    }
    let groups = store
        .params()
        .iter()
        .map(|p| classify(&p.name, config.num_blocks))
        .collect::<Result<Vec<_>>>()?;
    for (p, group) in store.params_mut().iter_mut().zip(groups) {
        p.trainable = match group {
            Group::Head => true,
            Group::Stem => config.train_stem,
            Group::Block(_) | Group::FinalNorm => false,
        };
    }
    Ok(ScheduleState {
        epoch: 0,
        next_block: config.num_blocks,
        unfreezes: 0,
        current_lr: config.initial_lr,
    })
}

/// Marks everything trainable except a frozen stem; for runs without blockwise fine-tuning.
pub fn unfreeze_all<T: Real>(store: &mut ParamStore<T>, config: &ScheduleConfig) -> Result<ScheduleState> {
    let mut state = init(store, config)?;
    for p in store.params_mut() {
        if classify(&p.name, config.num_blocks)? != Group::Stem {
            p.trainable = true;
        }
    }
    state.next_block = 0;
    Ok(state)
}

/// Runs at the start of `epoch`: when `epoch % t == 0` and a block is still
/// frozen, unfreezes it, moves to the block below and decays the learning rate.
pub fn on_epoch_start<T: Real>(
    state: &mut ScheduleState,
    config: &ScheduleConfig,
    store: &mut ParamStore<T>,
    epoch: usize,
) -> Result<Option<UnfreezeEvent>> {
    state.epoch = epoch;
    if epoch % config.epochs_per_unfreeze != 0 || state.next_block == 0 {
        return Ok(None);
    }
    let block = state.next_block;
    for p in store.params_mut() {
        match classify(&p.name, config.num_blocks)? {
            Group::Block(b) if b == block => p.trainable = true,
            Group::FinalNorm if block == config.num_blocks => p.trainable = true,
            _ => {}
        }
    }
    state.next_block -= 1;
    state.unfreezes += 1;
    state.current_lr = config.initial_lr * config.lr_decay.powi(state.unfreezes as i32);
    info!(
        "schedule epoch={epoch} unfrozen_block={block} lr={:e}",
        state.current_lr
    );
    Ok(Some(UnfreezeEvent {
        epoch,
        block,
        lr: state.current_lr,
    }))
}

/// Sorted names of the trainable parameters.
pub fn trainable_set<T: Real>(store: &ParamStore<T>) -> Vec<String> {
    store.trainable_names()
}

/// Number of encoder blocks whose parameters are all trainable.
pub fn trainable_blocks<T: Real>(store: &ParamStore<T>, num_blocks: usize) -> usize {
    (1..=num_blocks)
        .filter(|b| {
            let prefix = format!("backbone.block.{b}.");
            let mut params = store.params().iter().filter(|p| p.name.starts_with(&prefix)).peekable();
            params.peek().is_some() && params.all(|p| p.trainable)
        })
        .count()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn fake_store(blocks: usize) -> ParamStore<f32> {
        let mut s = ParamStore::new();
        for name in ["backbone.patch_embed.weight", "backbone.cls_token", "backbone.pos_embed"] {
            s.add_param(name, Tensor::zeros(&[1])).unwrap();
        }
        for b in 1..=blocks {
            s.add_param(format!("backbone.block.{b}.msa.wq"), Tensor::zeros(&[1])).unwrap();
            s.add_param(format!("backbone.block.{b}.mlp.fc1.weight"), Tensor::zeros(&[1])).unwrap();
        }
        s.add_param("backbone.norm.gamma", Tensor::zeros(&[1])).unwrap();
        s.add_param("head.fc.0.fc1.weight", Tensor::zeros(&[1])).unwrap();
        s
    }

    fn cfg(t: usize, blocks: usize) -> ScheduleConfig {
        ScheduleConfig {
            epochs_per_unfreeze: t,
            num_blocks: blocks,
            initial_lr: 3e-4,
            lr_decay: 0.85,
            total_epochs: 30,
            train_stem: false,
        }
    }

    #[test]
    fn init_freezes_blocks_and_keeps_head() {
        let mut s = fake_store(12);
        let st = init(&mut s, &cfg(2, 12)).unwrap();
        assert_eq!(st.next_block, 12);
        assert_eq!(trainable_blocks(&s, 12), 0);
        assert_eq!(trainable_set(&s), vec!["head.fc.0.fc1.weight".to_string()]);
    }

    #[test]
    fn first_unfreeze_is_last_block() {
        let mut s = fake_store(12);
        let c = cfg(2, 12);
        let mut st = init(&mut s, &c).unwrap();
        let ev = on_epoch_start(&mut st, &c, &mut s, 0).unwrap().unwrap();
        assert_eq!(ev.block, 12);
        assert_eq!(
            trainable_set(&s),
            vec![
                "backbone.block.12.mlp.fc1.weight",
                "backbone.block.12.msa.wq",
                "backbone.norm.gamma",
                "head.fc.0.fc1.weight"
            ]
        );
        assert!(on_epoch_start(&mut st, &c, &mut s, 1).unwrap().is_none());
        assert_eq!(st.next_block, 11);
    }

    #[test]
    fn unknown_names_are_rejected() {
        let mut s = fake_store(2);
        s.add_param("decoder.weight", Tensor::zeros(&[1])).unwrap();
        assert!(matches!(init(&mut s, &cfg(2, 2)), Err(Error::Naming(_))));
        let mut s = fake_store(3);
        assert!(matches!(init(&mut s, &cfg(2, 2)), Err(Error::Naming(_))));
    }

    #[test]
    fn replay_counts_blocks_and_lr() {
        for t in [1, 2, 3] {
            for blocks in [1, 2, 12] {
                let mut s = fake_store(blocks);
                let c = cfg(t, blocks);
                let mut st = init(&mut s, &c).unwrap();
                let mut last_lr = st.current_lr;
                for e in 0..40 {
                    on_epoch_start(&mut st, &c, &mut s, e).unwrap();
                    assert_eq!(trainable_blocks(&s, blocks), blocks.min(e / t + 1));
                    assert!(st.current_lr <= last_lr);
                    assert_eq!(st.current_lr, c.initial_lr * c.lr_decay.powi(st.unfreezes as i32));
                    last_lr = st.current_lr;
                }
            }
        }
    }

    #[test]
    fn twelve_unfreezes_of_085() {
        let c = cfg(2, 12);
        let ratio = c.lr_decay.powi(12);
        assert!((ratio - 0.142_241_757_136).abs() < 1e-9);
    }
}
