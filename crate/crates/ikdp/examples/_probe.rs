use ikdp::dataset::Dataset;
use ikdp::denoiser::DenoiserConfig;
use ikdp::diffusion::Parameterization;
use ikdp::kinematics::ChainSpec;
use ikdp::trainer::{train_with_arch, TrainingConfig};

fn main() {
    for (lr, d, layers, hid) in [(2e-3, 32usize, 1usize, 64usize), (2e-3, 64, 2, 128), (3e-3, 64, 1, 128)] {
        let param = Parameterization::PredictX0;
        let arch = DenoiserConfig {
            n_joints: 4, embed_dim: d, num_heads: 4, enc_layers: layers, dec_layers: layers,
            mlp_hidden: hid, time_embed_dim: d, param,
        };
        let ds = Dataset::generate(&ChainSpec::unit(4).unwrap(), 66, 17);
        let mut cfg = TrainingConfig::new(500, 42);
        cfg.batch_size = 16;
        cfg.lr = lr;
        cfg.param = param;
        cfg.eval_every = 100;
        cfg.eval_targets = 8;
        let (_, log) = train_with_arch(&ds, &cfg, &arch).unwrap();
        let losses: Vec<f64> = log.rows.iter().take(2000).map(|r| r.loss).collect();
        let k = losses.len() / 10;
        let head: f64 = losses[..k].iter().sum::<f64>() / k as f64;
        let tail: f64 = losses[losses.len() - k..].iter().sum::<f64>() / k as f64;
        let dists: Vec<f64> = log.rows.iter().take(2000).filter_map(|r| r.dist).collect();
        let dh: f64 = dists[..2].iter().sum::<f64>() / 2.0;
        let dt: f64 = dists[dists.len()-2..].iter().sum::<f64>() / 2.0;
        println!("lr={lr} d={d} layers={layers}: loss head {head:.4} tail {tail:.4} (drop {:.0}%), dist {dh:.3} -> {dt:.3}",
                 100.0 * (1.0 - tail / head));
    }
}
