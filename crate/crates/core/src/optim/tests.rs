use super::*;
use crate::networks::params::Side;
use crate::psi::ConvStack;
use crate::random::{stream, uniform};

fn one_param(v: f64) -> ModelParams {
    let mut p = ModelParams::new(Side::Dn);
    p.insert_param("w", Tensor::full(&[3], v));
    p
}

fn grad_map(v: f64) -> BTreeMap<String, Tensor> {
    BTreeMap::from([("w".to_string(), Tensor::full(&[3], v))])
}

#[test]
fn first_step_matches_closed_form() {
    let cfg = RmspropConfig::default();
    let mut p = one_param(0.0);
    let mut s = RmspropState::zeros_like(&p);
    rmsprop_step(&mut p, &grad_map(1.0), &mut s, &cfg, cfg.lr(0)).unwrap();
    let closed = 1e-3 / (0.1f64 + 1e-8).sqrt();
    assert!((closed - 3.1623e-3).abs() < 1e-7);
    for &v in p.param("w").unwrap().data() {
        assert!((-v - closed).abs() < 1e-9, "{v}");
    }
    for &v in s.tensors()["w"].data() {
        assert_eq!(v, 0.1f32 as f64);
    }
}

#[test]
fn localization_parameters_take_scaled_steps() {
    let cfg = RmspropConfig::default();
    let mut p = ModelParams::new(Side::Srn);
    p.insert_param("stn2.fc1.weight", Tensor::zeros(&[1]));
    p.insert_param("enc1.weight", Tensor::zeros(&[1]));
    let mut s = RmspropState::zeros_like(&p);
    let g = p.params().keys().map(|k| (k.clone(), Tensor::full(&[1], 1.0))).collect();
    rmsprop_step(&mut p, &g, &mut s, &cfg, cfg.lr(0)).unwrap();
    let stn = p.param("stn2.fc1.weight").unwrap().data()[0];
    let enc = p.param("enc1.weight").unwrap().data()[0];
    assert!((stn / enc - cfg.localization_lr_scale).abs() < 1e-6);
    assert!(is_localization("stn4.fc2.bias"));
    assert!(!is_localization("stn.x") && !is_localization("stnx.w") && !is_localization("enc1.stn1"));
}

#[test]
fn zero_gradient_only_decays_state() {
    let cfg = RmspropConfig::default();
    let mut p = one_param(0.25);
    let mut s = RmspropState::from_map(BTreeMap::from([("w".to_string(), Tensor::full(&[3], 1.0))]));
    rmsprop_step(&mut p, &grad_map(0.0), &mut s, &cfg, 1e-3).unwrap();
    assert!(p.param("w").unwrap().data().iter().all(|&v| v == 0.25));
    assert!(s.tensors()["w"].data().iter().all(|&v| v == 0.9f32 as f64));
}

#[test]
fn schema_mismatch_is_rejected() {
    let cfg = RmspropConfig::default();
    let mut p = one_param(0.0);
    let mut s = RmspropState::zeros_like(&p);
    let bad = BTreeMap::from([("w".to_string(), Tensor::full(&[2], 1.0))]);
    assert!(rmsprop_step(&mut p, &bad, &mut s, &cfg, 1e-3).is_err());
    let bad = BTreeMap::from([("u".to_string(), Tensor::full(&[3], 1.0))]);
    assert!(rmsprop_step(&mut p, &bad, &mut s, &cfg, 1e-3).is_err());
    let mut other = RmspropState::zeros_like(&one_param(0.0));
    other.v.insert("extra".into(), Tensor::zeros(&[1]));
    assert!(rmsprop_step(&mut p, &grad_map(1.0), &mut other, &cfg, 1e-3).is_err());
}

#[test]
fn learning_rate_decays_per_epoch() {
    let cfg = RmspropConfig::default();
    assert_eq!(cfg.lr(0), 1e-3);
    assert_eq!(cfg.lr(100), 1e-3 / 2.0);
    assert!((0..50).all(|n| cfg.lr(n + 1) < cfg.lr(n)));
}

#[test]
fn state_entries_stay_nonnegative() {
    let cfg = RmspropConfig::default();
    let mut rng = stream(1, 0);
    let mut p = one_param(0.0);
    let mut s = RmspropState::zeros_like(&p);
    for _ in 0..50 {
        let g = BTreeMap::from([("w".to_string(), uniform(&[3], -5.0, 5.0, &mut rng))]);
        rmsprop_step(&mut p, &g, &mut s, &cfg, 1e-3).unwrap();
        assert!(s.tensors()["w"].data().iter().all(|&v| v >= 0.0));
    }
}

#[test]
fn batches_are_seeded_and_cover_the_set() {
    let a = epoch_batches(37, 8, 5, 0);
    assert_eq!(a, epoch_batches(37, 8, 5, 0));
    assert_ne!(a, epoch_batches(37, 8, 5, 1));
    assert_ne!(a, epoch_batches(37, 8, 6, 0));
    let mut all: Vec<usize> = a.concat();
    all.sort_unstable();
    assert_eq!(all, (0..37).collect::<Vec<_>>());
    // 33 = 4 * 8 + 1: the single leftover item is dropped
    let b = epoch_batches(33, 8, 5, 0);
    assert_eq!(b.len(), 4);
    assert!(b.iter().all(|c| c.len() == 8));
}

fn small_nets(r: usize) -> (SrnConfig, DnConfig) {
    (
        SrnConfig {
            resolution: r,
            channels: [4, 6, 8, 8],
            use_stn: true,
        },
        DnConfig {
            resolution: r,
            channels: [4, 6, 8, 8],
        },
    )
}

/// Smooth target faces and a darker, shifted, noisy "stylized" copy.
fn toy_pairs(n: usize, r: usize, seed: u64) -> PairSet {
    let mut rng = stream(seed, 0);
    let rf = Tensor::from_fn(&[n, 3, r, r], |i| {
        let item = i / (3 * r * r);
        let ch = (i / (r * r)) % 3;
        let (y, x) = (((i / r) % r) as f64 / r as f64, (i % r) as f64 / r as f64);
        let phase = item as f64 * 0.7 + ch as f64;
        0.5 + 0.3 * (6.0 * x + phase).sin() * (4.0 * y - phase).cos()
    });
    let noise = uniform(&[n, 3, r, r], -0.05, 0.05, &mut rng);
    let sf = Tensor::from_fn(&[n, 3, r, r], |i| (0.6 * rf.data()[i] + 0.1 + noise.data()[i]).clamp(0.0, 1.0));
    PairSet::from_batches(&sf, &rf).unwrap()
}

struct Fixture {
    srn: SrnConfig,
    dn: DnConfig,
    psi: ConvStack,
    sched: TrainSchedule,
    opt: RmspropConfig,
    loop_cfg: TrainLoopConfig,
}

impl Fixture {
    fn new(srn: SrnConfig, dn: DnConfig, batch_size: usize) -> Self {
        Self {
            srn,
            dn,
            psi: ConvStack::tiny_fixed(7),
            sched: TrainSchedule::default(),
            opt: RmspropConfig::default(),
            loop_cfg: TrainLoopConfig {
                batch_size,
                seed: 3,
                d_steps: 1,
            },
        }
    }

    fn setup(&self) -> TrainSetup<'_> {
        TrainSetup {
            srn: &self.srn,
            dn: &self.dn,
            psi: &self.psi,
            sched: &self.sched,
            opt: &self.opt,
            loop_cfg: &self.loop_cfg,
        }
    }
}

#[test]
fn training_is_deterministic_and_reports_schedule() {
    let (srn, dn) = small_nets(32);
    let fx = Fixture::new(srn, dn, 4);
    let data = toy_pairs(8, 32, 1);
    let run = || {
        let mut st = TrainState::init(&fx.srn, &fx.dn, 9).unwrap();
        let logs: Vec<EpochSummary> = (0..3).map(|_| train_epoch(&mut st, &data, &fx.setup()).unwrap()).collect();
        (st, logs)
    };
    let (a, la) = run();
    let (b, lb) = run();
    assert_eq!(a, b);
    assert_eq!(la, lb);
    assert_eq!(a.epoch, 3);
    for (n, s) in la.iter().enumerate() {
        assert_eq!(s.epoch, n as u64);
        assert_eq!(s.lambda, fx.sched.lambda(n as u64));
        assert_eq!(s.eta, fx.sched.eta(n as u64));
        assert_eq!(s.lr, fx.opt.lr(n as u64));
        assert!(s.is_finite());
    }
    let row = la[0].csv_row();
    assert_eq!(row.split(',').count(), LOG_HEADER.split(',').count());
}

#[test]
fn steps_only_touch_their_own_network() {
    let (srn, dn) = small_nets(32);
    let fx = Fixture::new(srn, dn, 4);
    let data = toy_pairs(4, 32, 2);
    let mut st = TrainState::init(&fx.srn, &fx.dn, 1).unwrap();
    let (xs, xr) = data.gather(&[0, 1, 2, 3]).unwrap();
    let theta0 = st.theta.checksum();
    let pass = generator_forward(&st.theta, &fx.srn, &xs, &xr).unwrap();
    let fake = pass.output().clone();
    let phi0 = st.phi.checksum();
    d_step(&mut st.phi, &mut st.opt_phi, &fx.dn, &xr, &fake, &fx.opt, 1e-3).unwrap();
    assert_eq!(st.theta.checksum(), theta0);
    let phi1 = st.phi.checksum();
    assert_ne!(phi1, phi0);
    g_step(pass, &mut st.theta, &mut st.opt_theta, &st.phi, &fx.setup(), 1e-2, 1e-3, 1e-3).unwrap();
    assert_eq!(st.phi.checksum(), phi1);
    assert_ne!(st.theta.checksum(), theta0);
}

#[test]
fn empty_or_mismatched_data_is_rejected() {
    let (srn, dn) = small_nets(32);
    let fx = Fixture::new(srn, dn, 4);
    let mut st = TrainState::init(&fx.srn, &fx.dn, 1).unwrap();
    let empty = PairSet::new(Vec::new(), Vec::new()).unwrap();
    assert!(matches!(train_epoch(&mut st, &empty, &fx.setup()), Err(Error::InvalidArgument(_))));
    let wrong = toy_pairs(4, 64, 1);
    assert!(train_epoch(&mut st, &wrong, &fx.setup()).is_err());
    assert_eq!(st.epoch, 0);
}

/// Independent pure pixel-loss trainer built from the public primitives.
fn mse_only_epoch(theta: &mut ModelParams, opt: &mut RmspropState, data: &PairSet, fx: &Fixture, n: u64) {
    for idx in epoch_batches(data.len(), fx.loop_cfg.batch_size, fx.loop_cfg.seed, n) {
        let (xs, xr) = data.gather(&idx).unwrap();
        let mut g = Graph::new();
        let b = theta.bind(&mut g, true);
        let x = g.constant(xs);
        let t = g.constant(xr);
        let mut ctx = Ctx::new(&mut g, &b, theta, Mode::Train);
        let y = srn_forward_var(&mut ctx, &fx.srn, x).unwrap();
        let stats = std::mem::take(&mut ctx.stats);
        let loss = g.mse(y, t).unwrap();
        let mut grads = g.backward(loss).unwrap();
        let grads = collect_grads(&b, theta, &mut grads);
        rmsprop_step(theta, &grads, opt, &fx.opt, fx.opt.lr(n)).unwrap();
        theta.update_running_stats(&stats).unwrap();
    }
}

#[test]
fn zero_weights_reduce_to_pixel_loss_training() {
    let (srn, dn) = small_nets(32);
    let mut fx = Fixture::new(srn, dn, 4);
    fx.sched = TrainSchedule {
        lambda0: 0.0,
        eta0: 0.0,
        floor_div: 2.0,
    };
    let data = toy_pairs(8, 32, 4);
    let mut st = TrainState::init(&fx.srn, &fx.dn, 2).unwrap();
    let mut theta = st.theta.clone();
    let mut opt = st.opt_theta.clone();
    for n in 0..2 {
        train_epoch(&mut st, &data, &fx.setup()).unwrap();
        mse_only_epoch(&mut theta, &mut opt, &data, &fx, n);
        assert_eq!(st.theta, theta, "diverged in epoch {n}");
        assert_eq!(st.opt_theta, opt);
    }
}

#[test]
fn toy_run_halves_pixel_loss() {
    let srn = SrnConfig::with_resolution(32);
    let dn = DnConfig::with_resolution(32);
    let fx = Fixture::new(srn, dn, 4);
    let data = toy_pairs(16, 32, 5);
    let mut st = TrainState::init(&fx.srn, &fx.dn, 3).unwrap();
    let logs: Vec<EpochSummary> = (0..30).map(|_| train_epoch(&mut st, &data, &fx.setup()).unwrap()).collect();
    let (first, last) = (logs[0].mse, logs[29].mse);
    assert!(last < 0.5 * first, "epoch-1 {first}, epoch-30 {last}");
}

/// Trains the discriminator alone on bright (real) versus dark (fake) images
/// and returns the number of steps needed to exceed 90% eval-mode accuracy.
pub(crate) fn dn_separability_steps(max_steps: usize) -> Option<usize> {
    let dn = DnConfig::with_resolution(32);
    let mut phi = build_dn(&dn, 4).unwrap();
    let mut opt = RmspropState::zeros_like(&phi);
    let cfg = RmspropConfig::default();
    let mut rng = stream(8, 0);
    let batch = |lo: f64, hi: f64, rng: &mut rand_chacha::ChaCha8Rng| uniform(&[8, 3, 32, 32], lo, hi, rng);
    let test_bright = batch(0.55, 1.0, &mut rng);
    let test_dark = batch(0.0, 0.45, &mut rng);
    for step in 1..=max_steps {
        let real = batch(0.55, 1.0, &mut rng);
        let fake = batch(0.0, 0.45, &mut rng);
        d_step(&mut phi, &mut opt, &dn, &real, &fake, &cfg, cfg.lr(0)).unwrap();
        if step % 10 == 0 {
            let pr = crate::networks::dn_forward(&phi, &dn, &test_bright, Mode::Eval).unwrap().output;
            let pf = crate::networks::dn_forward(&phi, &dn, &test_dark, Mode::Eval).unwrap().output;
            let correct = pr.data().iter().filter(|&&p| p > 0.5).count() + pf.data().iter().filter(|&&p| p < 0.5).count();
            if correct as f64 / 16.0 > 0.9 {
                return Some(step);
            }
        }
    }
    None
}

#[test]
fn discriminator_separates_bright_from_dark() {
    let steps = dn_separability_steps(200);
    assert!(steps.is_some(), "no 90% accuracy within 200 steps");
}
