//! Times softmax, MoS-3 and CPR:20,100 heads at V = 10000, d = 128.

use scpr::bench::{bench_heads, head_macs, BenchSpec};

fn main() -> scpr::Result<()> {
    let spec = BenchSpec::default();
    for r in bench_heads(&spec)? {
        println!("{r} iqr_us={:.1}", r.iqr_us);
    }
    for h in &spec.heads {
        println!("macs_per_position head={} value={}", h.label(), head_macs(h, 10_000, 200, 0));
    }
    Ok(())
}
