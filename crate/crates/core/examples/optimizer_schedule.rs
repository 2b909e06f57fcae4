// Warmup / inverse-square-root learning rate, element-wise clipping and one
// AdamW step with the paper-scale hyperparameters.

use std::collections::BTreeSet;

use alignlab::nn::{Gradients, Group, Init, ParamId, ParamStore};
use alignlab::train::{clip_gradients, lr_at, AdamW, OptimSettings};

pub fn run_example() -> alignlab::Result<()> {
    let settings = OptimSettings::default();
    println!("step      lr");
    for step in [1, 500, 1000, 2000, 4000, 8000, 32000] {
        println!("{step:>5}  {:.3e}", lr_at(&settings, step)?);
    }

    let mut grads = Gradients::new(1);
    grads.set(ParamId::from_index(0), vec![7.2, -6.0, 3.1]);
    clip_gradients(&mut grads, settings.clip_value);
    println!("clipped {:?}", grads.get(ParamId::from_index(0)).unwrap_or_default());

    let mut store = ParamStore::new(0);
    let id = store.add("w", Group::Projector, true, &[1], Init::Ones)?;
    store.set_trainable(&BTreeSet::from([Group::Projector]))?;
    let mut opt = AdamW::new(&store, vec![id], &settings);
    let mut g = Gradients::new(1);
    g.set(id, vec![1.0]);
    let lr = lr_at(&settings, 1)?;
    opt.step(&mut store, &g, lr)?;
    println!("after one step at lr {lr:.1e}: w = {:.12}", store.tensor(id).data()[0]);
    Ok(())
}

#[allow(dead_code)]
fn main() -> alignlab::Result<()> {
    run_example()
}
