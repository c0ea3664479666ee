//! Shows how one position's vocabulary is split between the context,
//! reranker and default branches.

use scpr::partition::{build_cepr_partition, build_cpr_partition, Branch};

fn main() -> scpr::Result<()> {
    let words = ["<bos>", "<unk>", "<pad>", "the", "king", "queen", "man", "woman", "crown", "throne"];
    let logits_v = [0.0, -1.0, -9.0, 2.5, 1.0, 0.9, 0.2, 0.3, 1.5, 0.1];
    let logits_r2 = [0.0, -1.0, -9.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 3.0];
    let context = [4, 7];
    let p = build_cpr_partition(&logits_v, Some(&logits_r2[..]), &context, 1, 3)?;
    println!("cpr:1,3 with context {{king, woman}}");
    for b in [Branch::Context, Branch::Rerank1, Branch::Rerank2, Branch::Default] {
        let ids = p.ids_with(b);
        println!("  {b:?}: {:?}", ids.iter().map(|&i| words[i]).collect::<Vec<_>>());
    }
    let p = build_cepr_partition(&logits_v, &context, &[5, 8], 2)?;
    println!("cepr:2 with encoder {{queen, crown}}");
    for b in [Branch::Context, Branch::Encoder, Branch::Rerank1, Branch::Default] {
        let ids = p.ids_with(b);
        println!("  {b:?}: {:?}", ids.iter().map(|&i| words[i]).collect::<Vec<_>>());
    }
    Ok(())
}
