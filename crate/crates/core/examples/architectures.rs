//! Parameter counts of the paper-size MLP, CNN and DeepONet on the wing problem.

use priorlab::experiments::query_coords;
use priorlab::forward::{Problem, ProblemId};
use priorlab::networks::{parameter_count, Architecture, CnnSpec, DeepONetSpec, MlpSpec, OutputActivation};

fn main() {
    let problem = Problem::default_for(ProblemId::Wing);
    let out = OutputActivation::Softplus;
    for (label, arch) in [
        ("mlp", Architecture::Mlp(MlpSpec::paper(out))),
        ("mlp-half", Architecture::Mlp(MlpSpec::halved(out))),
        ("cnn", Architecture::Cnn(CnnSpec::paper(out))),
        ("deeponet", Architecture::DeepONet(DeepONetSpec::paper(query_coords(&problem), out))),
    ] {
        println!("{label:<9} {:>9} parameters", parameter_count(&arch, 20, 50));
    }
}
