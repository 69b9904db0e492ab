//! Rotary scores depend only on the offset between token positions.

use camrope::rope::{rope_camera, rope_video, AxisFrequencyTable, TokenPos};
use camrope::Result;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn main() -> Result<()> {
    let table = AxisFrequencyTable::with_default_split(16)?;
    let q: Vec<f64> = (0..16).map(|i| (i as f64 * 0.37).sin()).collect();
    let k: Vec<f64> = (0..16).map(|i| (i as f64 * 0.71).cos()).collect();

    for shift in [0, 3, 7] {
        let a = TokenPos::new(1 + shift, 2, shift);
        let b = TokenPos::new(4 + shift, 0, 2 + shift);
        let s = dot(&rope_video(&q, a, &table)?, &rope_video(&k, b, &table)?);
        println!("shift {shift}: score {s:.12}");
    }

    let early = rope_camera(&q, TokenPos::new(2, 3, 0), &table)?;
    let late = rope_camera(&q, TokenPos::new(2, 3, 9), &table)?;
    println!("camera rotation ignores time: {}", early == late);
    Ok(())
}
