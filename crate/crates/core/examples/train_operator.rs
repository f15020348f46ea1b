//! Trains a small learned inverse on the wing problem, saves it and reloads it.

use priorlab::experiments::{generate_dataset, observation, profile, rel_l2, train_operator, ErrorSpace};
use priorlab::networks::TrainedOperator;

fn main() -> priorlab::Result<()> {
    let mut cfg = profile("wing-desk", 0)?.remove(0);
    cfg.prior.k = Some(2000);
    cfg.network.as_mut().unwrap().train.max_epochs = 20;
    let problem = cfg.build_problem();
    let data = generate_dataset(&cfg, &problem)?;
    let op = train_operator(&cfg, &problem, &data)?;
    for h in op.history.iter().step_by(5) {
        println!("epoch {:>3}: train {:.4}  validation {:.4}  lr {:.1e}", h.epoch, h.train_loss, h.val_loss, h.lr);
    }
    let (m_true, d_obs) = observation(&cfg, &problem)?;
    println!("e_rel on the observation: {:.4}", rel_l2(&op.predict(&d_obs)?, &m_true, ErrorSpace::Parameter)?);
    let dir = std::env::temp_dir().join("priorlab-example-operator");
    op.save(&dir)?;
    println!("reloaded operator identical: {}", TrainedOperator::load(&dir)? == op);
    Ok(())
}
