//! End-to-end acceptance suite. Every test prints one `[PASS]`/`[FAIL]` line.

use std::collections::BTreeSet;
use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use transbridge_core::autodiff::gradcheck::{check, weighted_sum, DEFAULT_STEP};
use transbridge_core::autodiff::{DenseArray, Graph, NodeId, ParamStore};
use transbridge_core::decoder::*;
use transbridge_core::dsrecon::*;
use transbridge_core::encoder::rulebook::{strided, submanifold, Rulebook};
use transbridge_core::encoder::{sparse_conv, EncoderConfig, LevelFeatures, SparseConvOp};
use transbridge_core::harness::*;
use transbridge_core::model::{complete, detect, init_model, training_losses, ModelConfig};
use transbridge_core::sim::{simulate, SceneSpec};
use transbridge_core::voxel::{expand_children, occupancy, ActiveSet, GridConfig, VoxelCoord};
use transbridge_core::Result;

fn report(name: &str, pass: bool, detail: &str) {
    println!("[{}] {name}: {detail}", if pass { "PASS" } else { "FAIL" });
}

fn rand_array(rng: &mut ChaCha8Rng, dims: &[usize], scale: f64) -> DenseArray {
    let n = dims.iter().product();
    DenseArray::new(dims.to_vec(), (0..n).map(|_| rng.gen_range(-scale..scale)).collect()).unwrap()
}

fn random_set(rng: &mut ChaCha8Rng, n: i32, level: usize) -> ActiveSet {
    let density = rng.gen_range(0.05..0.5);
    let mut v = Vec::new();
    for x in 0..n {
        for y in 0..n {
            for z in 0..n {
                if rng.gen_bool(density) {
                    v.push(VoxelCoord::new(x, y, z));
                }
            }
        }
    }
    if v.is_empty() {
        v.push(VoxelCoord::new(0, 0, 0));
    }
    ActiveSet::new(level, v).unwrap()
}

type Build = Box<dyn Fn(&mut Graph, &ParamStore) -> Result<NodeId>>;

/// One random instance of an operation: parameters, the names to probe and
/// the scalar it feeds.
struct Instance {
    store: ParamStore,
    names: Vec<String>,
    build: Build,
}

fn small_model() -> ModelConfig {
    ModelConfig {
        grid: GridConfig { extent: [16, 16, 16], ..GridConfig::desk() },
        encoder: EncoderConfig { channels: vec![3, 4, 4, 3, 4], ..Default::default() },
        decoder: DecoderConfig { channels: vec![4, 3, 4, 3, 4], ..Default::default() },
    }
}

fn decoder_store(rng: &mut ChaCha8Rng) -> ParamStore {
    let cfg = small_model();
    let mut store = init_model(&cfg, rng.gen()).unwrap();
    for l in 1..cfg.num_levels() {
        let c = cfg.decoder.channel(l);
        store.set(&format!("decoder.level{l}.scm.w"), rand_array(rng, &[c, 1], 1.0)).unwrap();
    }
    store
}

fn names_with(store: &ParamStore, needle: &str) -> Vec<String> {
    store.names().filter(|n| n.contains(needle) || *n == "x").map(str::to_string).collect()
}

fn instance(op: &str, rng: &mut ChaCha8Rng) -> Instance {
    let mut store = ParamStore::new();
    let n = rng.gen_range(1..5);
    match op {
        "linear" => {
            let (ci, co) = (rng.gen_range(1..5), rng.gen_range(1..5));
            store.insert("x", rand_array(rng, &[n, ci], 1.0)).unwrap();
            store.insert("lin.w", rand_array(rng, &[ci, co], 1.0)).unwrap();
            store.insert("lin.b", rand_array(rng, &[co], 1.0)).unwrap();
            let w = rand_array(rng, &[n * co], 1.0).data().to_vec();
            Instance {
                store,
                names: vec!["x".into(), "lin.w".into(), "lin.b".into()],
                build: Box::new(move |g, s| {
                    let x = g.param(s, "x")?;
                    let y = g.linear(s, x, "lin")?;
                    weighted_sum(g, y, &w)
                }),
            }
        }
        "softmax" | "sigmoid" => {
            let dims = [n, rng.gen_range(1..5), rng.gen_range(2..5)];
            let axis = rng.gen_range(0..3);
            store.insert("x", rand_array(rng, &dims, 3.0)).unwrap();
            let w = rand_array(rng, &[dims.iter().product()], 1.0).data().to_vec();
            let soft = op == "softmax";
            Instance {
                store,
                names: vec!["x".into()],
                build: Box::new(move |g, s| {
                    let x = g.param(s, "x")?;
                    let y = if soft { g.softmax(x, axis)? } else { g.sigmoid(x) };
                    weighted_sum(g, y, &w)
                }),
            }
        }
        "layer_norm" => {
            let c = rng.gen_range(3..7);
            store.insert("x", rand_array(rng, &[n, c], 2.0)).unwrap();
            store.insert("ln.gain", rand_array(rng, &[c], 1.5)).unwrap();
            store.insert("ln.bias", rand_array(rng, &[c], 1.0)).unwrap();
            let w = rand_array(rng, &[n * c], 1.0).data().to_vec();
            Instance {
                store,
                names: vec!["x".into(), "ln.gain".into(), "ln.bias".into()],
                build: Box::new(move |g, s| {
                    let x = g.param(s, "x")?;
                    let y = g.layer_norm(s, x, 1, "ln")?;
                    weighted_sum(g, y, &w)
                }),
            }
        }
        "sparse_conv" => {
            let set = random_set(rng, 5, 1);
            let (rb, out): (Rulebook, Arc<ActiveSet>) = if rng.gen_bool(0.5) {
                submanifold(&set, [3, 3, 3]).unwrap()
            } else {
                strided(&set, [2, 2, 2], [2, 2, 2]).unwrap()
            };
            let (ci, co) = (rng.gen_range(1..4), rng.gen_range(1..4));
            store.insert("x", rand_array(rng, &[set.len(), ci], 1.0)).unwrap();
            store.insert("conv.w", rand_array(rng, &[rb.volume(), ci, co], 1.0)).unwrap();
            store.insert("conv.b", rand_array(rng, &[co], 1.0)).unwrap();
            let w = rand_array(rng, &[out.len() * co], 1.0).data().to_vec();
            let rb = Arc::new(rb);
            Instance {
                store,
                names: vec!["x".into(), "conv.w".into(), "conv.b".into()],
                build: Box::new(move |g, s| {
                    let x = g.param(s, "x")?;
                    let y = sparse_conv(g, s, x, rb.clone(), "conv")?;
                    weighted_sum(g, y, &w)
                }),
            }
        }
        "ub" => {
            let cfg = small_model();
            let mut store = decoder_store(rng);
            let set = Arc::new(random_set(rng, 2, 3));
            let c_up = cfg.decoder.channel(3);
            store.insert("x", rand_array(rng, &[set.len(), c_up], 1.0)).unwrap();
            let n_children = expand_children(&set, [2, 2, 2], &cfg.grid.level(2)).len();
            let c2 = cfg.decoder.channel(2);
            let w = rand_array(rng, &[n_children * c2], 1.0).data().to_vec();
            let names = names_with(&store, "level2.ub");
            Instance {
                store,
                names,
                build: Box::new(move |g, s| {
                    let node = g.param(s, "x")?;
                    let ub = ub_forward(g, s, 2, &LevelFeatures { set: set.clone(), node }, [2, 2, 2], &cfg.grid.level(2), c2)?;
                    weighted_sum(g, ub.features.node, &w)
                }),
            }
        }
        "ib" => {
            let mut store = decoder_store(rng);
            let set = Arc::new(ActiveSet::new(2, (0..n as i32).map(|i| VoxelCoord::new(i, 0, 0)).collect()).unwrap());
            store.insert("x", rand_array(rng, &[n, 4], 1.0)).unwrap();
            let w = rand_array(rng, &[n * 3], 1.0).data().to_vec();
            let names = names_with(&store, "level2.ib");
            Instance {
                store,
                names,
                build: Box::new(move |g, s| {
                    let node = g.param(s, "x")?;
                    let out = ib_forward(g, s, 2, &LevelFeatures { set: set.clone(), node }, 3)?;
                    weighted_sum(g, out.node, &w)
                }),
            }
        }
        "scm" => {
            let mut store = decoder_store(rng);
            let set = Arc::new(ActiveSet::new(1, (0..n as i32).map(|i| VoxelCoord::new(i, 0, 0)).collect()).unwrap());
            store.insert("x", rand_array(rng, &[n, 4], 2.0)).unwrap();
            let target = DenseArray::new(vec![n, 1], (0..n).map(|_| f64::from(u8::from(rng.gen_bool(0.5)))).collect()).unwrap();
            let names = names_with(&store, "level1.scm");
            Instance {
                store,
                names,
                build: Box::new(move |g, s| {
                    let node = g.param(s, "x")?;
                    let e = scm_scores(g, s, 1, &LevelFeatures { set: set.clone(), node })?;
                    g.smooth_l1(e, &target, 1.0)
                }),
            }
        }
        "losses" => {
            let m = rng.gen_range(1..8);
            store.insert("x", rand_array(rng, &[m], 3.0)).unwrap();
            store.insert("e", rand_array(rng, &[m, 1], 2.0)).unwrap();
            let labels: Vec<f64> = (0..m).map(|_| f64::from(u8::from(rng.gen_bool(0.5)))).collect();
            let target = rand_array(rng, &[m, 1], 2.0);
            let delta = rng.gen_range(0.5..2.0);
            let alpha = rng.gen_range(0.5..4.0);
            Instance {
                store,
                names: vec!["x".into(), "e".into()],
                build: Box::new(move |g, s| {
                    let x = g.param(s, "x")?;
                    let e = g.param(s, "e")?;
                    let l_d = g.bce_with_logits(x, &labels)?;
                    let l_t = g.smooth_l1(e, &target, delta)?;
                    joint_loss(g, l_d, l_t, alpha)
                }),
            }
        }
        _ => unreachable!(),
    }
}

#[test]
fn gradient_suite() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let ops = ["linear", "softmax", "sigmoid", "layer_norm", "sparse_conv", "ub", "ib", "scm", "losses"];
    let mut worst = Vec::new();
    for op in ops {
        let mut w: f64 = 0.0;
        for _ in 0..20 {
            let inst = instance(op, &mut rng);
            let names: Vec<&str> = inst.names.iter().map(String::as_str).collect();
            let res = check(&inst.store, &names, DEFAULT_STEP, 6, &inst.build).unwrap();
            w = w.max(res.rel_error());
        }
        worst.push((op, w));
    }
    let secs = start.elapsed().as_secs_f64();
    let max = worst.iter().map(|w| w.1).fold(0.0, f64::max);
    let pass = max < 1e-4 && secs < 120.0;
    let detail: Vec<String> = worst.iter().map(|(o, w)| format!("{o} {w:.1e}")).collect();
    report("gradient suite (20 points per op, step 1e-5)", pass, &format!("{}; {secs:.1}s", detail.join(", ")));
    assert!(pass);
}

const N: i32 = 8;

fn dense_conv(set: &ActiveSet, x: &[f64], c_in: usize, w: &[f64], b: &[f64], kernel: [u32; 3], stride: [i32; 3], pad: [i32; 3], outputs: &[VoxelCoord]) -> Vec<f64> {
    let c_out = b.len();
    let idx = |x: i32, y: i32, z: i32| ((x * N + y) * N + z) as usize;
    let mut grid = vec![0.0; (N * N * N) as usize * c_in];
    for (r, c) in set.iter().enumerate() {
        let at = idx(c.ix, c.iy, c.iz) * c_in;
        grid[at..at + c_in].copy_from_slice(&x[r * c_in..(r + 1) * c_in]);
    }
    let mut out = Vec::new();
    for o in outputs {
        let mut acc = b.to_vec();
        let mut k = 0;
        for dx in 0..kernel[0] as i32 {
            for dy in 0..kernel[1] as i32 {
                for dz in 0..kernel[2] as i32 {
                    let p = [o.ix * stride[0] - pad[0] + dx, o.iy * stride[1] - pad[1] + dy, o.iz * stride[2] - pad[2] + dz];
                    if p.iter().all(|v| (0..N).contains(v)) {
                        let at = idx(p[0], p[1], p[2]) * c_in;
                        for ci in 0..c_in {
                            for co in 0..c_out {
                                acc[co] += grid[at + ci] * w[(k * c_in + ci) * c_out + co];
                            }
                        }
                    }
                    k += 1;
                }
            }
        }
        out.extend(acc);
    }
    out
}

#[test]
fn sparse_conv_matches_dense() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut worst: f64 = 0.0;
    let mut sets_ok = true;
    for trial in 0..200 {
        let set = random_set(&mut rng, N, 1);
        let (c_in, c_out) = (rng.gen_range(1..4), rng.gen_range(1..4));
        let x = rand_array(&mut rng, &[set.len() * c_in], 1.0).data().to_vec();
        let (kernel, stride) = match trial % 3 {
            0 => ([3, 3, 3], None),
            1 => ([2, 2, 2], Some([2, 2, 2])),
            _ => ([3, 3, 5], Some([1, 1, 5])),
        };
        let k = (kernel[0] * kernel[1] * kernel[2]) as usize;
        let w = rand_array(&mut rng, &[k * c_in * c_out], 1.0).data().to_vec();
        let b = rand_array(&mut rng, &[c_out], 1.0).data().to_vec();
        let (rb, out, s, pad) = match stride {
            None => {
                let (rb, out) = submanifold(&set, kernel).unwrap();
                sets_ok &= *out == set;
                (rb, out, [1; 3], [1; 3])
            }
            Some(st) => {
                let (rb, out) = strided(&set, kernel, st).unwrap();
                let expect: BTreeSet<VoxelCoord> = set.iter().map(|c| VoxelCoord::new(c.ix / st[0] as i32, c.iy / st[1] as i32, c.iz / st[2] as i32)).collect();
                sets_ok &= out.iter().collect::<BTreeSet<_>>() == expect;
                (rb, out, st.map(|v| v as i32), [0, 1, 2].map(|a| ((kernel[a] - st[a]) / 2) as i32))
            }
        };
        let mut g = Graph::new();
        let xn = g.constant(DenseArray::new(vec![set.len(), c_in], x.clone()).unwrap());
        let wn = g.constant(DenseArray::new(vec![k, c_in, c_out], w.clone()).unwrap());
        let bn = g.constant(DenseArray::vector(b.clone()).unwrap());
        let y = g.custom(Arc::new(SparseConvOp { rulebook: Arc::new(rb) }), &[xn, wn, bn]).unwrap();
        let expect = dense_conv(&set, &x, c_in, &w, &b, kernel, s, pad, out.coords());
        for (a, e) in g.value(y).data().iter().zip(&expect) {
            worst = worst.max((a - e).abs());
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = sets_ok && worst < 1e-9 && secs < 60.0;
    report("sparse conv vs dense conv (200 instances)", pass, &format!("max abs err {worst:.1e}, active sets {}, {secs:.1}s", if sets_ok { "match" } else { "differ" }));
    assert!(pass);
}

#[test]
fn pyramid_consistency() {
    let grid = GridConfig::desk();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut mismatches = 0;
    for _ in 0..50 {
        // clustered points, some outside the grid
        let centers: Vec<[f64; 3]> = (0..rng.gen_range(3..12)).map(|_| [rng.gen_range(-7.0..7.0), rng.gen_range(-7.0..7.0), rng.gen_range(-2.5..1.5)]).collect();
        let pts: Vec<[f64; 3]> = (0..rng.gen_range(500..5000))
            .map(|_| {
                let c = centers[rng.gen_range(0..centers.len())];
                let s = rng.gen_range(0.05..1.5);
                [c[0] + rng.gen_range(-s..s), c[1] + rng.gen_range(-s..s), c[2] + rng.gen_range(-s..s)]
            })
            .collect();
        let pyr = build_existence_pyramid(&pts, &grid).unwrap();
        // the finest grid bounds the scene; coarse cells may overhang it
        let inside: Vec<[f64; 3]> = pts.iter().copied().filter(|&p| grid.level(1).coord_of(p).is_some()).collect();
        for l in 1..=grid.num_levels() {
            let (direct, _) = occupancy(&inside, &grid.level(l)).unwrap();
            if *pyr.level(l) != direct {
                mismatches += 1;
            }
        }
    }
    let pass = mismatches == 0;
    report("pyramid consistency (50 frames, all levels)", pass, &format!("{mismatches} mismatching levels"));
    assert!(pass);
}

#[test]
fn dsrecon_smear_reduction() {
    let spec = SceneSpec { speed: [0.5, 1.0], ..SceneSpec::default() };
    let densifier = MidpointDensifier { params: DensifyParams::default() };
    let mut worst: f64 = 0.0;
    for i in 0..20 {
        let seq = simulate(scene_seed(11, i), &spec).unwrap();
        let dense = compose_dsrecon(&seq, &densifier).unwrap();
        let s = smear_metric(&seq, &dense);
        worst = worst.max(s.dsrecon / s.naive);
    }

    // a static scene: DSRecon without densification is the merged sequence
    let static_spec = SceneSpec { moving_objects: 0, ego_speed: 0.0, ego_yaw_rate: 0.0, ..SceneSpec::default() };
    let mut exact = true;
    for i in 0..3 {
        let seq = simulate(scene_seed(12, i), &static_spec).unwrap();
        let (mut naive, _) = naive_merge(&seq);
        naive.sort_by(|a, b| a.partial_cmp(b).unwrap());
        for f in compose_dsrecon(&seq, &IdentityDensifier).unwrap() {
            let mut pts = f.points.clone();
            pts.sort_by(|a, b| a.partial_cmp(b).unwrap());
            exact &= pts == naive;
        }
    }
    let pass = worst <= 0.2 && exact;
    report("dsrecon smear reduction (20 sequences)", pass, &format!("worst dsrecon/naive smear {worst:.4}, static equivalence {}", if exact { "exact" } else { "broken" }));
    assert!(pass);
}

#[test]
fn nds_reference_value() {
    let v = nds_score(0.5603, [0.3011, 0.2555, 0.3828, 0.2194, 0.1887]).unwrap();
    let pass = (v - 0.6454).abs() <= 5e-4;
    report("nds reference row", pass, &format!("{v:.5} vs 0.6454"));
    assert!(pass);
}

fn acceptance_run() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.model.encoder.channels = vec![8, 16, 16, 16, 32];
    cfg.model.decoder.channels = vec![32, 16, 16, 8, 8];
    cfg.scene.frames = 3;
    cfg.scene.sensor.azimuth_step_deg = 0.8;
    cfg.data = DataConfig { seed: 2024, train_scenes: 160, eval_scenes: 40, frame: 1, dir: None };
    cfg.epochs = 2;
    cfg.batch_size = 4;
    cfg.optimizer.lr = 3e-3;
    cfg
}

#[test]
fn scm_contracts() {
    let mut cfg = acceptance_run();
    cfg.data.train_scenes = 4;
    cfg.data.eval_scenes = 0;
    let data = Dataset::build(&cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut store = init_model(&cfg.model, 8).unwrap();
    for l in 1..cfg.model.num_levels() {
        let c = cfg.model.decoder.channel(l);
        store.set(&format!("decoder.level{l}.scm.w"), rand_array(&mut rng, &[c, 1], 1.0)).unwrap();
        store.set(&format!("decoder.level{l}.scm.b"), rand_array(&mut rng, &[1], 1.5)).unwrap();
    }
    let (mut keep_ok, mut ratio_ok, mut prop_ok) = (true, true, true);
    let (mut kept_total, mut worst_ratio) = (0, 0.0f64);
    for s in &data.train {
        let mut g = Graph::new();
        let det = detect(&mut g, &store, &cfg.model, &s.input).unwrap();
        let out = complete::<ChaCha8Rng>(&mut g, &store, &cfg.model, &det, Mode::Inference { beta: 0.7 }).unwrap();
        for l in 1..cfg.model.num_levels() {
            let lv = out.level(l);
            let above: BTreeSet<VoxelCoord> = lv.features.set.iter().zip(&lv.score_values).filter(|(_, &e)| e > 0.7).map(|(c, _)| c).collect();
            keep_ok &= lv.kept.iter().collect::<BTreeSet<_>>() == above;
            kept_total += above.len();
        }
        let mut g = Graph::new();
        let losses = training_losses(&mut g, &store, &cfg.model, s, &mut rng).unwrap();
        for l in 1..cfg.model.num_levels() {
            let lv = losses.decoder.level(l);
            worst_ratio = worst_ratio.max(lv.stats.empty_ratio());
            ratio_ok &= lv.stats.empty_ratio() <= 0.75;
            let truth = s.pyramid.level(l);
            let expect: BTreeSet<VoxelCoord> = lv.features.set.iter().filter(|c| truth.contains(*c)).collect();
            prop_ok &= lv.kept.iter().collect::<BTreeSet<_>>() == expect;
        }
    }
    let pass = keep_ok && ratio_ok && prop_ok && kept_total > 0;
    report(
        "scm contracts",
        pass,
        &format!("keep set {keep_ok} ({kept_total} kept), worst empty ratio {worst_ratio:.3}, training propagation {prop_ok}"),
    );
    assert!(pass);
}

#[test]
fn joint_training_direction() {
    let start = Instant::now();
    let base = acceptance_run();
    let data = Dataset::build(&base).unwrap();
    let mut iou_ok = true;
    let mut det_wins = 0;
    for seed in 0..3 {
        let mut runs = Vec::new();
        for alpha in [3.0, 0.0] {
            let mut cfg = base.clone();
            cfg.seed = seed;
            cfg.model.decoder.alpha = alpha;
            let out = train(&cfg, &data, None).unwrap();
            runs.push((out.report.level(2).unwrap().iou, out.report.detection_loss));
        }
        let ((iou3, det3), (iou0, det0)) = (runs[0], runs[1]);
        iou_ok &= iou3 >= 0.5 && iou0 <= 0.2;
        if det3 <= det0 {
            det_wins += 1;
        }
        println!("  seed {seed}: level-2 IoU {iou3:.4} (alpha 3) vs {iou0:.4} (alpha 0); detection loss {det3:.5} vs {det0:.5}");
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = iou_ok && det_wins >= 2 && secs < 1800.0;
    report(
        "joint training direction (200 scenes, 3 seeds)",
        pass,
        &format!("IoU bounds {}, detection loss not worse in {det_wins}/3 seeds, {secs:.0}s", if iou_ok { "met" } else { "missed" }),
    );
    assert!(pass);
}

#[test]
fn training_determinism() {
    let mut cfg = acceptance_run();
    cfg.data.train_scenes = 8;
    cfg.data.eval_scenes = 2;
    cfg.epochs = 1;
    cfg.checkpoint_every = 1;
    let data = Dataset::build(&cfg).unwrap();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    train(&cfg, &data, Some(a.path())).unwrap();
    train(&cfg, &data, Some(b.path())).unwrap();
    let same = [CHECKPOINT_FILE, METRICS_FILE]
        .iter()
        .all(|f| std::fs::read(a.path().join(f)).unwrap() == std::fs::read(b.path().join(f)).unwrap());
    report("training determinism", same, if same { "checkpoint and metrics bit-identical" } else { "outputs differ" });
    assert!(same);
}
