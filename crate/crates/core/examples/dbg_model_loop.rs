use fsf_core::fock::HilbertSpec;
use fsf_core::homodyne::{bin_dataset, simulate_probe, ProbePlan};
use fsf_core::model::{compose_fsf_tensor, herald_povm, FsfParams, PovmKind};
use fsf_core::tomography::*;

fn main() {
    let spec = HilbertSpec::new(6).unwrap();
    let params = FsfParams::new(0.5, 0.45, 0.73, 0.45, spec).unwrap();
    let povm = herald_povm(0.45, 7, PovmKind::Click).unwrap();
    let truth = compose_fsf_tensor(&params, &povm).unwrap();
    let plan = ProbePlan::linear_grid(0.1, 1.5, 20, 20000, 30, 20260810);
    let cfg = ReconConfig::default();
    let records: Vec<ProbeRecord> = plan
        .amplitudes
        .iter()
        .enumerate()
        .map(|(i, &alpha)| {
            let ds = simulate_probe(&truth, alpha, &plan, i).unwrap();
            ProbeRecord {
                alpha,
                histogram: bin_dataset(&ds, cfg.grid).unwrap(),
                trials_total: ds.trials_total,
                heralds: ds.heralds,
            }
        })
        .collect();
    for iters in [150usize, 500, 1500, 4000] {
        let c = ReconConfig { max_iters: iters, ..Default::default() };
        let t0 = std::time::Instant::now();
        let recon = mlr_reconstruct(&records, &c).unwrap();
        let f = choi_fidelity(&recon.tensor, &truth).unwrap();
        let stats = fsf_core::model::conditional_stats(&recon.tensor);
        println!(
            "iters {iters:4} used {} conv {}  ll_end {:.9}  fid {f:.5}  P(1|1) {:.4}  wall {:.1}s",
            recon.iterations,
            recon.converged,
            recon.log_likelihood.last().unwrap(),
            stats.prob(1, 1).unwrap_or(f64::NAN),
            t0.elapsed().as_secs_f64()
        );
    }
}
