use fsf_core::fock::HilbertSpec;
use fsf_core::homodyne::{bin_dataset, simulate_probe, ProbePlan};
use fsf_core::model::build_tensor_attenuation;
use fsf_core::tomography::*;
use num_complex::Complex64 as C64;

fn main() {
    let spec = HilbertSpec::new(6).unwrap();
    let truth = build_tensor_attenuation(0.5, spec).unwrap();
    let plan = ProbePlan::linear_grid(0.1, 1.5, 10, 20000, 30, 404);
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
    for (iters, mu) in [(150usize, 0.5f64), (150, 1.0), (150, 3.5), (150, 7.0), (150, 20.0), (150, 1.0e6), (50, 3.5), (50, 7.0)] {
        let c = ReconConfig { max_iters: iters, mu, ..Default::default() };
        let recon = mlr_reconstruct(&records, &c).unwrap();
        let f = choi_fidelity(&recon.tensor, &truth).unwrap();
        println!(
            "iters {iters:4} mu {mu:9.1}  ll {:.12}  fid {f:.6}  converged {}  warn {}",
            recon.log_likelihood.last().unwrap(),
            recon.converged,
            recon.warnings.len()
        );
    }
    let alphas: Vec<C64> = plan.amplitudes.clone();
    let res = fixed_point_residual(&truth, &alphas, &cfg).unwrap();
    println!("fixed point residual {res:.3e}");
    let truth_choi = extend_trace_preserving(&truth);
    let (ll_truth, resid) = debug_ll(&truth_choi, &records, &cfg);
    println!("LL(truth) = {ll_truth:.12}, one-step residual from truth on real data = {resid:.3e}");
    // very long undiluted run
    let c = ReconConfig { max_iters: 2000, mu: 1.0, ..Default::default() };
    let recon = mlr_reconstruct(&records, &c).unwrap();
    let f = choi_fidelity(&recon.tensor, &truth).unwrap();
    println!("iters 2000 mu 1.0: ll {:.12} fid {f:.6} converged {}", recon.log_likelihood.last().unwrap(), recon.converged);
}
