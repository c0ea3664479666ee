//! The softmax bottleneck in two dimensions. With frozen embeddings
//! man=(0,0), king=(1,0), woman=(0,1), queen=(1,1), no single hidden state
//! puts half its mass on king and half on woman: raising both raises queen
//! even more. A context partition holding {king, woman} escapes this.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use scpr::eval::kl_divergence;
use scpr::heads::{head_nll, HeadConfig, HeadInput, HeadKind, OutputHead, Target};
use scpr::train::{adamw_step, AdamState, AdamW};
use scpr::transformer::SeqLayout;
use scpr::{Graph, ParamStore, Tensor};

const WORDS: [&str; 4] = ["man", "king", "woman", "queen"];

fn fit(kind: HeadKind) -> scpr::Result<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut store = ParamStore::<f64>::new();
    let emb = store.insert("emb", Tensor::from_rows(&[vec![0.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]])?)?;
    store.set_trainable(emb, false);
    let hidden = store.insert_normal("hidden", &[2, 2], 0.5, &mut rng)?;
    let head = OutputHead::new(HeadConfig::new(kind, 2).with_k(1, 2), emb, false, &mut store, &mut rng)?;
    let (tokens, layout) = (vec![vec![1, 2]], SeqLayout::from_lens(&[2]));
    let targets = [Target::Ignore, Target::Dist(vec![(1, 0.5), (2, 0.5)])];
    let opt = AdamW {
        lr: 0.05,
        warmup_steps: 0,
        weight_decay: 0.0,
        ..AdamW::default()
    };
    let mut state = AdamState::new(&store);
    let run = |g: &mut Graph<f64>, s: &ParamStore<f64>| {
        let h = g.param(s, hidden);
        head.forward(g, s, &HeadInput { hidden: h, block: None, layout: &layout, tokens: &tokens, encoder: None, special: &[] })
    };
    for _ in 0..1000 {
        let mut g = Graph::new();
        let out = run(&mut g, &store)?;
        let loss = head_nll(&mut g, out, &targets)?;
        let grads = g.backward(loss)?.param_grads();
        drop(g);
        adamw_step(&mut store, &grads, &mut state, &opt)?;
    }
    let mut g = Graph::inference();
    let out = run(&mut g, &store)?;
    let p = out.probs(&mut g)?;
    Ok(g.value(p).row(1).to_vec())
}

fn main() -> scpr::Result<()> {
    for kind in [HeadKind::Softmax, HeadKind::Cpr] {
        let p = fit(kind)?;
        let kl = kl_divergence(&[(1, 0.5), (2, 0.5)], &p)?;
        let shown: Vec<String> = WORDS.iter().zip(&p).map(|(w, q)| format!("{w}={q:.3}")).collect();
        println!("{:<8} {}  KL={kl:.4}", kind.name(), shown.join(" "));
    }
    println!("best possible single-state softmax KL = ln 2 = {:.4}", std::f64::consts::LN_2);
    Ok(())
}
