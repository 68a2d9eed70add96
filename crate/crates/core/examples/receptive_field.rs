//! Prints which pixels one and two criss-cross passes can see from a source
//! pixel, and the multiply counts against dense attention.
//!
//!     cargo run --example receptive_field

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use xlsor::autograd::AttentionKind;
use xlsor::cca::{attention_cost, influence_map, reduced_channels, CcaWeights};
use xlsor::mask::Mask;
use xlsor::tensor::Tensor;

fn draw(m: &Mask, source: (usize, usize)) {
    for y in 0..m.height() {
        let row: String = (0..m.width())
            .map(|x| match ((x, y) == source, m.get(x, y)) {
                (true, _) => 'S',
                (false, true) => '#',
                (false, false) => '.',
            })
            .collect();
        println!("  {row}");
    }
}

fn main() -> xlsor::Result<()> {
    let (h, w, c) = (5, 7, 8);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let weights = CcaWeights::init(c, &mut rng);
    let input = Tensor::randn(&[1, c, h, w], 0.5, &mut rng);
    let source = (2, 1);
    for passes in [1, 2] {
        let reach = influence_map(|t| weights.apply(t, AttentionKind::CrissCross, passes), &input, source)?;
        println!("{passes} pass(es): {} of {} pixels", reach.count(), h * w);
        draw(&reach, source);
    }

    let (c, cr) = (16, reduced_channels(16));
    println!("\nmultiplies per attention pass, C = {c}, C' = {cr}:");
    for s in [16, 32, 64, 128] {
        let cc = attention_cost(s, s, c, cr, AttentionKind::CrissCross);
        let nl = attention_cost(s, s, c, cr, AttentionKind::NonLocal);
        println!("  {s:>3}x{s:<3} criss-cross {cc:>12}  dense {nl:>14}  ratio {:.2}", nl as f64 / cc as f64);
    }
    Ok(())
}
