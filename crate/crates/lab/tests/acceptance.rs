//! Acceptance suite: one pass/fail line per criterion.
//!
//! Criteria 5 to 10 and parts of 11 and 12 use the default model trained for
//! 2000 steps. The first run trains it (cached under the cargo target
//! directory, keyed by configuration and model sources); later runs reuse it.

mod common;

use std::io::{Read, Write};
use std::net::TcpStream;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use freeu_core::autodiff::Graph;
use freeu_core::fft::{fft2, ifft2};
use freeu_core::freeu::{
    apply_backbone_scaling, apply_skip_spectral, backbone_factor_map, BackboneScaling, FreeUConfig,
    FreeUStageConfig,
};
use freeu_core::rng::SeededRng;
use freeu_core::tensor::Tensor;
use freeu_core::unet::{stage_average_map, StageTap};
use freeu_lab::checkpoint::Checkpoint;
use freeu_lab::config::{RunConfig, ServeSpec};
use freeu_lab::figures::{fig13, fig2, fig5, fig6, FigureParams};
use freeu_lab::job::{execute, run_sample_job, SampleJob};
use freeu_lab::service::{router, Service};
use freeu_lab::train::{smoothed_loss, train_to, TrainLog};
use num_complex::Complex64;
use serde_json::{json, Value};

type Outcome = Result<String, String>;

fn ensure(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

/// Direct `O(N⁴)` transform in 64 bits, row-major, unshifted.
fn brute_dft(plane: &[f64], n: usize) -> Vec<Complex64> {
    let mut out = vec![Complex64::new(0.0, 0.0); n * n];
    for ky in 0..n {
        for kx in 0..n {
            let mut acc = Complex64::new(0.0, 0.0);
            for y in 0..n {
                for x in 0..n {
                    let phase = -2.0 * std::f64::consts::PI * ((ky * y + kx * x) % n) as f64 / n as f64;
                    acc += Complex64::from_polar(plane[y * n + x], phase);
                }
            }
            out[ky * n + kx] = acc;
        }
    }
    out
}

/// Radius of unshifted frequency index `(ky, kx)` on an `n × n` grid.
fn freq_radius(ky: usize, kx: usize, n: usize) -> f64 {
    let signed = |k: usize| ((k + n / 2) % n) as f64 - (n / 2) as f64;
    signed(ky).hypot(signed(kx))
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut rng = SeededRng::new(101, 0);
    let (mut err, mut round, mut parseval) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..20 {
        let x = rng.normal_tensor(&[16, 16]);
        let f = fft2(&x).unwrap();
        let want = brute_dft(&x.data().iter().map(|&v| v as f64).collect::<Vec<_>>(), 16);
        for (got, w) in f.to_complex().iter().zip(&want) {
            err = err.max((got - w).norm());
        }
        let back = ifft2(&f).unwrap();
        for (b, &v) in back.real().data().iter().zip(x.data()) {
            round = round.max((b - v).abs() as f64);
        }
        let space: f64 = x.data().iter().map(|&v| (v as f64).powi(2)).sum();
        let freq: f64 = f.to_complex().iter().map(|c| c.norm_sqr()).sum::<f64>() / 256.0;
        parseval = parseval.max((space - freq).abs() / space);
    }
    let secs = start.elapsed().as_secs_f64();
    let detail = format!(
        "fft2 vs DFT max {err:.2e}, roundtrip {round:.2e}, Parseval {parseval:.2e}, {secs:.3} s"
    );
    ensure(err <= 1e-4 && round <= 1e-5 && parseval <= 1e-4 && secs < 1.0, detail)
}

mod mirror {
    //! The two-layer net of criterion 2 in 64 bits.

    pub fn conv(x: &[f64], xs: [usize; 4], w: &[f64], ws: [usize; 4], b: &[f64]) -> Vec<f64> {
        let [n, ci, h, wd] = xs;
        let [co, _, k, _] = ws;
        let p = k / 2;
        let mut out = vec![0.0; n * co * h * wd];
        for s in 0..n {
            for o in 0..co {
                for y in 0..h {
                    for xx in 0..wd {
                        let mut acc = b[o];
                        for c in 0..ci {
                            for dy in 0..k {
                                for dx in 0..k {
                                    let iy = (y + dy) as isize - p as isize;
                                    let ix = (xx + dx) as isize - p as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                        continue;
                                    }
                                    acc += x[((s * ci + c) * h + iy as usize) * wd + ix as usize]
                                        * w[((o * ci + c) * k + dy) * k + dx];
                                }
                            }
                        }
                        out[((s * co + o) * h + y) * wd + xx] = acc;
                    }
                }
            }
        }
        out
    }

    pub fn silu(v: &[f64]) -> Vec<f64> {
        v.iter().map(|&a| a / (1.0 + (-a).exp())).collect()
    }
}

fn criterion_2() -> Outcome {
    let start = Instant::now();
    let mut rng = SeededRng::new(102, 0);
    let xs = [2, 2, 8, 8];
    let (w1s, w2s) = ([4, 2, 3, 3], [1, 4, 3, 3]);
    let x = rng.normal_tensor(&xs);
    let c = rng.normal_tensor(&[2, 1, 8, 8]);
    let params = [rng.normal_tensor(&w1s).map(|v| 0.3 * v),
        rng.normal_tensor(&[4]).map(|v| 0.1 * v),
        rng.normal_tensor(&w2s).map(|v| 0.3 * v),
        rng.normal_tensor(&[1]).map(|v| 0.1 * v)];

    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let pv: Vec<_> = params.iter().map(|p| g.param(p.clone())).collect();
    let h = g.conv2d(xv, pv[0], pv[1], 1, 1).unwrap();
    let h = g.silu(h).unwrap();
    let y = g.conv2d(h, pv[2], pv[3], 1, 1).unwrap();
    let cv = g.constant(c.clone());
    let weighted = g.mul(y, cv).unwrap();
    let loss = g.sum(weighted).unwrap();
    g.backward(loss).unwrap();

    let f64s = |t: &Tensor| t.data().iter().map(|&v| v as f64).collect::<Vec<_>>();
    let (x64, c64) = (f64s(&x), f64s(&c));
    let reference = |p: &[Vec<f64>]| -> f64 {
        let h = mirror::silu(&mirror::conv(&x64, xs, &p[0], w1s, &p[1]));
        let y = mirror::conv(&h, [2, 4, 8, 8], &p[2], w2s, &p[3]);
        y.iter().zip(&c64).map(|(a, b)| a * b).sum()
    };
    let base: Vec<Vec<f64>> = params.iter().map(f64s).collect();
    let step = 1e-5;
    let (mut checked, mut worst) = (0usize, 0.0f64);
    for (i, pvar) in pv.iter().enumerate() {
        let grad = g.grad_or_zeros(*pvar);
        for j in 0..base[i].len() {
            let mut p = base.clone();
            p[i][j] += step;
            let up = reference(&p);
            p[i][j] -= 2.0 * step;
            let down = reference(&p);
            let fd = (up - down) / (2.0 * step);
            let a = grad.data()[j] as f64;
            if a.abs().max(fd.abs()) > 1e-4 {
                checked += 1;
                worst = worst.max((a - fd).abs() / a.abs().max(fd.abs()));
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let total: usize = base.iter().map(Vec::len).sum();
    let detail = format!(
        "{checked} of {total} parameters checked, max relative error {worst:.2e}, {secs:.2} s"
    );
    ensure(checked >= 50 && worst <= 1e-3 && secs < 30.0, detail)
}

fn criterion_3() -> Outcome {
    let mut rng = SeededRng::new(103, 0);
    let mut failures = 0;
    for case in 0..1000 {
        let (h, w) = (1 + rng.below(12), 1 + rng.below(12));
        let b = rng.uniform_range(0.0, 3.0).max(1e-3);
        let map = if case % 10 == 0 {
            Tensor::full(vec![1, 1, h, w], rng.normal())
        } else {
            rng.normal_tensor(&[1, 1, h, w])
        };
        let alpha = backbone_factor_map(&map, b).unwrap();
        let a = alpha.tensor().data();
        let m = map.data();
        let lo = m.iter().copied().fold(f32::INFINITY, f32::min);
        let hi = m.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let ok = if lo == hi {
            a.iter().all(|&v| v == 1.0)
        } else {
            let (bl, bh) = ((b as f32).min(1.0), (b as f32).max(1.0));
            a.iter().all(|&v| (bl..=bh).contains(&v))
                && m.iter().zip(a).all(|(&x, &v)| {
                    (x != lo || v == 1.0) && (x != hi || v == b as f32)
                })
        };
        failures += usize::from(!ok);
    }
    ensure(failures == 0, format!("{failures} of 1000 random maps violate bounds or endpoints"))
}

fn criterion_4() -> Outcome {
    let mut rng = SeededRng::new(104, 0);
    let x = rng.normal_tensor(&[2, 8, 8, 8]);
    let alpha = backbone_factor_map(&stage_average_map(&x).unwrap(), 1.6).unwrap();
    let y = apply_backbone_scaling(&x, &alpha, 0.5).unwrap();
    let untouched = (0..2).all(|s| {
        y.batch_item(s).unwrap().slice_channels(4, 8).unwrap()
            .bit_eq(&x.batch_item(s).unwrap().slice_channels(4, 8).unwrap())
    });
    let scaled = !y.slice_channels(0, 4).unwrap().bit_eq(&x.slice_channels(0, 4).unwrap());

    let (mut beyond, mut below, mut cells) = (0.0f64, 0.0f64, 0usize);
    for (shape, s, r) in [([2, 3, 16, 16], 0.3, 4.0), ([1, 4, 8, 8], 0.0, 2.5), ([1, 2, 16, 16], 0.8, 5.5)] {
        let h = rng.normal_tensor(&shape);
        let out = apply_skip_spectral(&h, s, r).unwrap();
        let n = shape[2];
        for (pin, pout) in h.data().chunks_exact(n * n).zip(out.data().chunks_exact(n * n)) {
            let fin = brute_dft(&pin.iter().map(|&v| v as f64).collect::<Vec<_>>(), n);
            let fout = brute_dft(&pout.iter().map(|&v| v as f64).collect::<Vec<_>>(), n);
            let rms = (fin.iter().map(|c| c.norm_sqr()).sum::<f64>() / (n * n) as f64).sqrt();
            for k in 0..n * n {
                let scale = fin[k].norm().max(rms);
                if freq_radius(k / n, k % n, n) >= r {
                    beyond = beyond.max((fout[k] - fin[k]).norm() / scale);
                    cells += 1;
                } else {
                    below = below.max((fout[k] - fin[k] * s).norm() / scale);
                }
            }
        }
    }
    let detail = format!(
        "unscaled channels bit-identical: {untouched}; {cells} coefficients beyond threshold max change {beyond:.2e}; attenuated cells within {below:.2e} of s"
    );
    ensure(untouched && scaled && beyond <= 1e-5 && below <= 1e-4, detail)
}

fn identity_all(stages: usize) -> FreeUConfig {
    FreeUConfig::identity(&(1..=stages).collect::<Vec<_>>())
}

fn criterion_5(dir: &Path) -> Outcome {
    let t = common::trained();
    let stages = t.checkpoint.model.config().stages();
    let job = SampleJob {
        seed: 5,
        count: 4,
        steps: 50,
        freeu: identity_all(stages),
        record_trajectory: true,
        compare: true,
        r_cut: 4.0,
    };
    let out = dir.join("c5");
    let (_, files) = run_sample_job(&t.path, &job, &out).unwrap();
    let base = common::read_tree(&out.join("baseline"));
    let freeu = common::read_tree(&out.join("freeu"));
    ensure(
        !base.is_empty() && base == freeu,
        format!("{} artifact files, baseline and FreeU byte-identical: {}", files.len(), base == freeu),
    )
}

fn params() -> FigureParams {
    FigureParams::new(&common::trained().checkpoint.model, 200)
}

fn criterion_6() -> Outcome {
    let t = common::trained();
    let full = t.checkpoint.config.schedule.build().unwrap();
    let f = fig5(&t.checkpoint.model, &full, &params()).unwrap();
    let means: Vec<f64> = (0..3)
        .map(|i| f.top_quartiles(i).iter().sum::<f64>() / 16.0)
        .collect();
    let q0 = f.top_quartiles(0);
    let sd = (q0.iter().map(|v| (v - means[0]).powi(2)).sum::<f64>() / 15.0).sqrt();
    let se = sd / 4.0;
    let gap = means[0] - means[2];
    let detail = format!(
        "top-quartile means b=1.0 {:.5}, b=1.2 {:.5}, b=1.4 {:.5}; gap {gap:.5} vs standard error {se:.5}",
        means[0], means[1], means[2]
    );
    ensure(means[0] > means[1] && means[1] > means[2] && gap > se, detail)
}

fn criterion_7() -> Outcome {
    let t = common::trained();
    let full = t.checkpoint.config.schedule.build().unwrap();
    let f = fig6(&t.checkpoint.model, &full, &params()).unwrap();
    let k = f.skip.values.len();
    let top = k / 2..k;
    let above = top.clone().filter(|&i| f.skip.values[i] > f.backbone.values[i]).count();
    let frac = above as f64 / top.len() as f64;
    let detail = format!(
        "skip above backbone in {above} of {} top-half bands (skip {:?}, backbone {:?})",
        top.len(),
        f.skip.values[top.clone()].iter().map(|v| format!("{v:.3}")).collect::<Vec<_>>(),
        f.backbone.values[top].iter().map(|v| format!("{v:.3}")).collect::<Vec<_>>(),
    );
    ensure(frac >= 0.75, detail)
}

fn criterion_8() -> Outcome {
    let t = common::trained();
    let full = t.checkpoint.config.schedule.build().unwrap();
    let f = fig2(&t.checkpoint.model, &full, &params()).unwrap();
    let n = f.tail_deltas.len() as f64;
    let low = f.tail_deltas.iter().map(|d| d.0).sum::<f64>() / n;
    let high = f.tail_deltas.iter().map(|d| d.1).sum::<f64>() / n;
    ensure(
        low < high,
        format!("final 75% of steps over {n} seeds: low-band mean |d| {low:.5}, high-band {high:.5}"),
    )
}

fn criterion_9() -> Outcome {
    let t = common::trained();
    let full = t.checkpoint.config.schedule.build().unwrap();
    let mut p = params();
    p.freeu = FreeUConfig::default_for(&t.checkpoint.model.stage_sites());
    let f = fig13(&t.checkpoint.model, &full, &p).unwrap();
    let frac = f.fraction_not_above();
    ensure(
        frac >= 0.7,
        format!("FreeU high-band amplitude at or below baseline at {:.1}% of {} steps", 100.0 * frac, f.steps.len()),
    )
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

fn criterion_10() -> Outcome {
    let t = common::trained();
    let model = &t.checkpoint.model;
    let full = t.checkpoint.config.schedule.build().unwrap();
    let text = "[freeu]\nenabled = true\nbackbone_scaling = \"constant\"\n\
        [[freeu.stages]]\nl = 1\nb_l = 1.4\ns_l = 1.0\nr_thresh = 2.0\n\
        [[freeu.stages]]\nl = 2\nb_l = 1.4\ns_l = 1.0\nr_thresh = 4.0\n\
        [sample]\ncount = 4\nsteps = 50\nseed = 10\ncompare = true\n";
    let cfg = RunConfig::from_toml_str(text).unwrap();
    let constant_job = SampleJob::from_config(&cfg);
    let mut structure_job = constant_job.clone();
    structure_job.freeu.backbone_scaling = BackboneScaling::StructureRelated;
    let constant = execute(model, &full, &constant_job).unwrap();
    let structure = execute(model, &full, &structure_job).unwrap();
    let base = constant.baseline.as_ref().unwrap();
    let non_identity = !constant.freeu.images.bit_eq(&base.images)
        && !constant.freeu.images.bit_eq(&structure.freeu.images);

    let x = SeededRng::new(110, 0).normal_tensor(&[2, 1, 32, 32]);
    let mut maps = Vec::new();
    let mut tap = |tap: StageTap| maps.push(stage_average_map(&tap.backbone).unwrap());
    model.forward(&x, 100, None, Some(&mut tap)).unwrap();
    let mut worst = 0.0f64;
    for map in &maps {
        let alpha = backbone_factor_map(map, 1.4).unwrap();
        let [n, _, h, w] = map.dims4().unwrap();
        for s in 0..n {
            let range = s * h * w..(s + 1) * h * w;
            let a: Vec<f64> = alpha.tensor().data()[range.clone()].iter().map(|&v| v as f64 - 1.0).collect();
            let m: Vec<f64> = map.data()[range].iter().map(|&v| v as f64).collect();
            worst = worst.max(1.0 - pearson(&a, &m));
        }
    }
    let detail = format!(
        "constant factor changes samples: {non_identity}; structure-related corr(alpha-1, mean map) within {worst:.1e} of 1 on {} trained stage maps",
        maps.len()
    );
    ensure(non_identity && worst <= 1e-6, detail)
}

fn run_bin(cwd: &Path, args: &[&str]) -> bool {
    Command::new(env!("CARGO_BIN_EXE_freeu-lab"))
        .args(args)
        .current_dir(cwd)
        .output()
        .map(|o| o.status.success())
        .unwrap_or(false)
}

fn criterion_11(dir: &Path) -> Outcome {
    let t = common::trained();
    let bytes = std::fs::read(&t.path).unwrap();
    let reloaded = Checkpoint::from_bytes(&bytes).unwrap();
    let round_trip = reloaded.to_bytes() == bytes;

    let mut cfg = RunConfig::default();
    cfg.train.steps = 4;
    cfg.train.snapshot_every = 0;
    let mut straight = Checkpoint::initial(&cfg).unwrap();
    train_to(&mut straight, None, &mut TrainLog::default(), |_, _| {}).unwrap();
    let path = dir.join("c11-half.ckpt");
    let mut half = cfg.clone();
    half.train.steps = 2;
    let mut first = Checkpoint::initial(&half).unwrap();
    train_to(&mut first, Some(&path), &mut TrainLog::default(), |_, _| {}).unwrap();
    let mut resumed = Checkpoint::load(&path).unwrap();
    resumed.config.train.steps = 4;
    train_to(&mut resumed, None, &mut TrainLog::default(), |_, _| {}).unwrap();
    let resume_exact = resumed.to_bytes() == straight.to_bytes();

    let mut tiny = common::tiny_config(Path::new("run"));
    tiny.output.dir = "run".into();
    tiny.output.checkpoint = "run/model.ckpt".into();
    let mut trees = Vec::new();
    let mut cli_ok = true;
    for name in ["c11-a", "c11-b"] {
        let cwd = dir.join(name);
        std::fs::create_dir_all(&cwd).unwrap();
        std::fs::write(cwd.join("run.toml"), tiny.to_toml_string()).unwrap();
        for verb in [
            &["synth-data"][..],
            &["train"],
            &["sample"],
            &["compare", "--b1", "1.5", "--s2", "0.5"],
            &["figure", "fig2"],
            &["figure", "fig5"],
            &["figure", "fig6"],
            &["figure", "fig13"],
        ] {
            let mut args = verb.to_vec();
            args.extend(["--config", "run.toml"]);
            cli_ok &= run_bin(&cwd, &args);
        }
        trees.push(common::read_tree(&cwd.join("run")));
    }
    let reproducible = cli_ok && trees[0] == trees[1];
    let detail = format!(
        "trained checkpoint save/load/save identical: {round_trip}; 2+2 resumed steps equal 4 straight: {resume_exact}; {} CLI artifacts byte-identical across runs: {reproducible}",
        trees[0].len()
    );
    ensure(round_trip && resume_exact && reproducible, detail)
}

/// One HTTP/1.1 exchange over a fresh connection.
fn http(addr: std::net::SocketAddr, method: &str, path: &str, body: &Value) -> (u16, Value) {
    let body = body.to_string();
    let mut stream = TcpStream::connect(addr).unwrap();
    write!(
        stream,
        "{method} {path} HTTP/1.1\r\nHost: {addr}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
        body.len()
    )
    .unwrap();
    let mut raw = Vec::new();
    stream.read_to_end(&mut raw).unwrap();
    let text = String::from_utf8(raw).unwrap();
    let (head, payload) = text.split_once("\r\n\r\n").unwrap();
    assert!(!head.to_ascii_lowercase().contains("chunked"));
    let status = head.split_whitespace().nth(1).unwrap().parse().unwrap();
    (status, serde_json::from_str(payload).unwrap())
}

fn criterion_12() -> Outcome {
    let t = common::trained();
    let state = Service::new(t.checkpoint.clone(), &ServeSpec::default()).unwrap();
    let rt = tokio::runtime::Runtime::new().unwrap();
    let listener = rt.block_on(tokio::net::TcpListener::bind("127.0.0.1:0")).unwrap();
    let addr = listener.local_addr().unwrap();
    rt.spawn(async move { axum::serve(listener, router(state)).await });

    let stages = t.checkpoint.model.config().stages();
    let identity = serde_json::to_value(identity_all(stages)).unwrap();
    let (s, resp) = http(addr, "POST", "/api/compare", &json!({ "seed": 12, "steps": 40, "freeu": identity, "count": 2 }));
    let identical = s == 200 && resp["baseline"] == resp["freeu"] && resp["identical"] == true;

    let mut bad = FreeUConfig::default_for(&t.checkpoint.model.stage_sites());
    bad.stages[0].backbone_factor = -1.0;
    let (s, resp) = http(addr, "POST", "/api/sample", &json!({ "seed": 0, "steps": 40, "count": 1, "freeu": bad }));
    let rejected = s == 422 && resp["fields"][0]["field"] == "freeu.stages[0].b_l";

    let freeu = |b: f64| {
        let mut f = FreeUConfig::default_for(&t.checkpoint.model.stage_sites());
        f.stages.push(FreeUStageConfig::new(3, b, 0.8, 8.0));
        serde_json::to_value(f).unwrap()
    };
    let bodies = [
        json!({ "seed": 31, "steps": 40, "freeu": freeu(1.1), "count": 2 }),
        json!({ "seed": 32, "steps": 40, "freeu": freeu(1.3), "count": 2 }),
    ];
    let concurrent: Vec<(u16, Value)> = std::thread::scope(|s| {
        let handles: Vec<_> = bodies
            .iter()
            .map(|b| s.spawn(move || http(addr, "POST", "/api/compare", b)))
            .collect();
        handles.into_iter().map(|h| h.join().unwrap()).collect()
    });
    let sequential: Vec<(u16, Value)> = bodies.iter().map(|b| http(addr, "POST", "/api/compare", b)).collect();
    let matches = concurrent.iter().zip(&sequential).all(|(c, s)| {
        c.0 == 200 && s.0 == 200 && c.1["baseline"] == s.1["baseline"] && c.1["freeu"] == s.1["freeu"]
    });
    rt.shutdown_background();
    let detail = format!(
        "identity compare payloads equal: {identical}; b_l = -1 answered 422 naming the field: {rejected}; concurrent compares equal sequential: {matches}; no console build involved"
    );
    ensure(identical && rejected && matches, detail)
}

#[test]
fn acceptance() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let start = Instant::now();
    let t = common::trained();
    let losses = &t.log.losses;
    let (early, late) = (smoothed_loss(losses, 200, 100), smoothed_loss(losses, 2000, 100));
    println!(
        "trained model: {} steps in {:.1} min of CPU (budget 30 min), smoothed loss at step 200 {:.4}, at step 2000 {:.4}, ready after {:.1} s",
        t.checkpoint.step,
        t.seconds / 60.0,
        early.unwrap_or(f64::NAN),
        late.unwrap_or(f64::NAN),
        start.elapsed().as_secs_f64()
    );
    let budget = t.seconds <= 1800.0 && t.checkpoint.step == 2000;

    type Check<'a> = Box<dyn Fn() -> Outcome + 'a>;
    let criteria: Vec<(u32, &str, Check)> = vec![
        (1, "fft2 against brute-force DFT", Box::new(criterion_1)),
        (2, "autodiff against finite differences", Box::new(criterion_2)),
        (3, "factor map bounds and endpoints", Box::new(criterion_3)),
        (4, "channel and frequency isolation", Box::new(criterion_4)),
        (5, "end-to-end identity compare", Box::new(|| criterion_5(d))),
        (6, "backbone factor suppresses high frequencies", Box::new(criterion_6)),
        (7, "skip features carry more high frequency", Box::new(criterion_7)),
        (8, "low band changes slowly", Box::new(criterion_8)),
        (9, "FreeU trajectories stay at or below baseline", Box::new(criterion_9)),
        (10, "constant versus structure-related factor", Box::new(criterion_10)),
        (11, "persistence and reproducibility", Box::new(|| criterion_11(d))),
        (12, "HTTP service", Box::new(criterion_12)),
    ];
    let mut failed = Vec::new();
    for (n, name, check) in criteria {
        let begin = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check))
            .unwrap_or_else(|e| {
                let msg = e
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default();
                Err(format!("panicked: {msg}"))
            });
        let mut outcome = outcome;
        if (6..=9).contains(&n) && !budget {
            outcome = Err(format!(
                "trained model outside its budget ({:.1} min, step {})",
                t.seconds / 60.0,
                t.checkpoint.step
            ));
        }
        let secs = begin.elapsed().as_secs_f64();
        match &outcome {
            Ok(detail) => println!("criterion {n:>2} PASS  {name}: {detail} [{secs:.1} s]"),
            Err(detail) => {
                println!("criterion {n:>2} FAIL  {name}: {detail} [{secs:.1} s]");
                failed.push(n);
            }
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
