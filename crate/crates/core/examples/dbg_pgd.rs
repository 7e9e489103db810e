use fsf_core::fock::HilbertSpec;
use fsf_core::homodyne::{bin_dataset, simulate_probe, ProbePlan};
use fsf_core::model::{compose_fsf_tensor, conditional_stats, herald_povm, FsfParams, PovmKind};
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

    let spec7 = HilbertSpec::new(6).unwrap();
    let mut c = ChoiOperator::maximally_mixed(spec7);
    let mut eta = 0.5f64;
    let (mut grad, mut ll) = engine.r_and_ll(&c);
    let mut passes = 1;
    let t0 = std::time::Instant::now();
    for outer in 0..400 {
        // ascent trial with backtracking
        let mut accepted = false;
        for _ in 0..30 {
            let mut cand = c.clone();
            let step = grad.scale(eta);
            cand_add(&mut cand, &step);
            debug_project_tp_psd(&mut cand, 6);
            let (g2, ll2) = engine.r_and_ll(&cand);
            passes += 1;
            if ll2 > ll {
                c = cand;
                grad = g2;
                ll = ll2;
                eta *= 1.6;
                accepted = true;
                break;
            }
            eta *= 0.4;
        }
        if !accepted {
            println!("stalled at outer {outer}");
            break;
        }
        if outer % 25 == 0 || outer == 399 {
            let mut cc = c.clone();
            cc.project_psd();
            let tensor = tensor_from_choi_pub(&cc);
            let f = choi_fidelity(&tensor, &truth).unwrap();
            let stats = conditional_stats(&tensor);
            println!(
                "outer {outer:4} passes {passes:5}  ll {ll:.9}  fid {f:.5}  P(1|1) {:.4}  eta {eta:.2e}  [{:.0}s]",
                stats.prob(1, 1).unwrap_or(f64::NAN),
                t0.elapsed().as_secs_f64()
            );
        }
    }
}

fn cand_add(c: &mut ChoiOperator, step: &nalgebra::DMatrix<num_complex::Complex64>) {
    let m = c.matrix() + step;
    *c = choi_from_matrix(m, c.d_in(), c.d_out());
}

fn tensor_from_choi_pub(c: &ChoiOperator) -> fsf_core::model::ProcessTensor {
    tensor_from_choi(c, "pgd").unwrap()
}
