//! Samples a training set for the interface problem and writes it to disk.

use priorlab::datagen::{generate, Dataset};
use priorlab::forward::{ForwardModel, InterfaceModel, ProblemId};
use priorlab::numerics::Vector;
use priorlab::priors::{PriorFamily, PriorSampler, PriorSpec};

fn main() -> priorlab::Result<()> {
    let model = InterfaceModel::new(100, 15);
    let spec = PriorSpec::new(PriorFamily::Laplace, Vector::zeros(100), 1.0, 1.0, model.grid())?;
    let data = generate(&model, ProblemId::Interface, &PriorSampler::new(&spec)?, 2000, 0.1, 7)?;
    let dir = std::env::temp_dir().join("priorlab-example-dataset");
    data.save(&dir)?;
    let back = Dataset::load(&dir)?;
    println!("{} pairs ({} redrawn) written to {}; reload identical: {}", back.len(), back.meta.redraws, dir.display(), back.m == data.m && back.d == data.d);
    Ok(())
}
