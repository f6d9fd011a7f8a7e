//! Reverse-mode gradients through a tiny conv + softmax graph.

use spcl::autodiff::Tape;

fn main() -> spcl::Result<()> {
    let mut tape = Tape::new();
    // [B, H, W, C] input and a [kh, kw, in, out] kernel.
    let x = tape.param(&[1, 3, 3, 1], (0..9).map(|v| v as f64 / 9.0).collect())?;
    let k = tape.param(
        &[3, 3, 1, 2],
        (0..18).map(|v| (v as f64 - 9.0) / 18.0).collect(),
    )?;
    let y = tape.conv2d(x, k, 1, 1)?;
    let p = tape.channel_softmax(y);
    let logp = tape.log(p);
    let targets: Vec<Option<usize>> = (0..9).map(|i| Some(i % 2)).collect();
    let loss = tape.nll(logp, &targets)?;
    tape.backward(loss)?;

    println!("loss {:.6}", tape.scalar(loss));
    println!("d loss / d kernel {:?}", tape.grad(k).unwrap());
    println!("d loss / d input  {:?}", tape.grad(x).unwrap());
    println!("tape holds {} nodes", tape.len());
    Ok(())
}
