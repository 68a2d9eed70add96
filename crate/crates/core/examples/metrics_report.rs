//! Scores a few hand-made masks and prints the dataset report.
//!
//!     cargo run --example metrics_report

use xlsor::mask::Mask;
use xlsor::metrics::{averaged_hausdorff, confusion, evaluate_dataset};

fn main() -> xlsor::Result<()> {
    let a = Mask::from_fn(3, 3, |x, y| x == 0 && y < 2);
    let b = Mask::from_fn(3, 3, |x, y| x == 0 && y == 2);
    println!("AVD between {{(0,0),(0,1)}} and {{(0,2)}}: {}", averaged_hausdorff(&a, &b)?);

    let gt = Mask::from_fn(8, 8, |x, y| (2..6).contains(&x) && (2..6).contains(&y));
    let shifted = Mask::from_fn(8, 8, |x, y| (3..7).contains(&x) && (2..6).contains(&y));
    let c = confusion(&shifted, &gt)?;
    println!("shifted square: {c:?}, dice {:.4}, vs {:.4}", c.dice(), c.volumetric_similarity());

    let empty = Mask::zeros(8, 8);
    let report = evaluate_dataset(&[gt.clone(), shifted, empty], &[gt.clone(), gt.clone(), gt])?;
    println!("{}", report.to_json()?);
    Ok(())
}
