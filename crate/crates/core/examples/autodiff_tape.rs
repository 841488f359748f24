//! Fit a tiny linear model with the tape and SGD, then confirm one
//! gradient against a central difference.
//!
//! cargo run --example autodiff_tape

use wend::autodiff::{sgd_step, OptimizerState, ParamId, ParamSet, Tape, Tensor, Var};

/// Mean squared error of `x w^T + b` against `y`.
fn loss(params: &ParamSet, ids: [ParamId; 2], x: &Tensor, y: &Tensor, tape: &mut Tape) -> wend::Result<Var> {
    let w = tape.param(params, ids[0]);
    let b = tape.param(params, ids[1]);
    let xv = tape.leaf(x);
    let yv = tape.leaf(y);
    let pred = tape.linear(xv, w, Some(b))?;
    let neg = tape.mul_scalar(yv, -1.0);
    let err = tape.add(pred, neg)?;
    let sq = tape.mul(err, err)?;
    Ok(tape.mean(sq))
}

fn main() -> wend::Result<()> {
    // y = 3 x0 - 2 x1 + 0.5
    let xs: Vec<f64> = (0..32).flat_map(|i| [(i % 7) as f64 / 7.0, (i % 5) as f64 / 5.0]).collect();
    let ys: Vec<f64> = xs.chunks(2).map(|r| 3.0 * r[0] - 2.0 * r[1] + 0.5).collect();
    let x = Tensor::from_vec(&[32, 2], xs)?;
    let y = Tensor::from_vec(&[32, 1], ys)?;

    let mut params = ParamSet::new();
    let ids = [
        params.add("w", Tensor::zeros(&[1, 2]), 1.0, true),
        params.add("b", Tensor::zeros(&[1]), 1.0, false),
    ];
    let mut opt = OptimizerState::new(&params, 0.5, 1).with_momentum(0.9, 0.0);

    for step in 0..200 {
        params.zero_grad();
        let mut tape = Tape::new();
        let l = loss(&params, ids, &x, &y, &mut tape)?;
        tape.backward_into(l, &mut params)?;
        sgd_step(&mut params, &mut opt, 0.5)?;
        if step % 50 == 0 {
            println!("step {step:>3}  loss {:.6}", tape.value(l)[0]);
        }
    }
    for p in params.iter() {
        println!("{} = {:?}", p.name, p.tensor.data());
    }

    params.zero_grad();
    let mut tape = Tape::new();
    let l = loss(&params, ids, &x, &y, &mut tape)?;
    tape.backward_into(l, &mut params)?;
    let analytic = params.get(ids[0]).tensor.grad.as_ref().unwrap()[0];
    let h = 1e-5;
    let shifted = |delta: f64| -> wend::Result<f64> {
        let mut ps = params.clone();
        ps.get_mut(ids[0]).tensor.data_mut()[0] += delta;
        let mut t = Tape::new();
        let l = loss(&ps, ids, &x, &y, &mut t)?;
        Ok(t.value(l)[0])
    };
    let numeric = (shifted(h)? - shifted(-h)?) / (2.0 * h);
    println!("d loss / d w0: tape {analytic:.3e}, finite difference {numeric:.3e}");
    Ok(())
}
