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
    let engine = DebugEngine::new(&records, &cfg);

    let c_run = ReconConfig { max_iters: 300, ..Default::default() };
    let recon = mlr_reconstruct(&records, &c_run).unwrap();
    let c_iter = recon.choi.clone();
    let c_truth = extend_trace_preserving(&truth);

    println!("fid(iterate, truth) = {:.4}", choi_fidelity(&recon.tensor, &truth).unwrap());
    for i in 0..=10 {
        let t = i as f64 / 10.0;
        let mat = c_iter.matrix().scale(1.0 - t) + c_truth.matrix().scale(t);
        let c = choi_from_matrix(mat, c_iter.d_in(), c_iter.d_out());
        let ll = engine.ll(&c);
        println!("t = {t:.1}  LL = {ll:.9}");
    }
}
