//! Evaluates the three forward operators at their true models.

use priorlab::forward::{Bending, ForwardModel, InterfaceModel, TomoModel, WingModel};

fn main() -> priorlab::Result<()> {
    let wing = WingModel::new(50, 20);
    let d = wing.evaluate(&wing.true_model())?;
    println!("wing: first data {:.5}, last {:.5}", d[0], d[19]);

    let interface = InterfaceModel::new(100, 15);
    let z = interface.true_model();
    let d = interface.evaluate(&z)?;
    println!("interface: peak depth {:.3} km, gravity data range [{:.4}, {:.4}]", z.fold(0.0f64, |a, &b| a.max(b)), d.fold(f64::INFINITY, |a, &b| a.min(b)), d.fold(0.0f64, |a, &b| a.max(b)));

    for bending in [Bending::Off, Bending::paper_default()] {
        let tomo = TomoModel::new(bending);
        let t = tomo.evaluate(&tomo.true_model())?;
        println!("tomo ({bending:?}): {} traveltimes, mean {:.6} s", t.len(), t.mean().unwrap());
    }
    Ok(())
}
