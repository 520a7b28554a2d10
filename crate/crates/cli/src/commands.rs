use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use anyhow::{bail, Context};
use mgt_core::consolidation::{reference, stack_layers, AttnMap, SmoothMethod, SmoothSpec};
use mgt_core::io::{
    load_checkpoint, map_to_bytes, map_to_gray, pgm_from_bytes, pgm_to_bytes, ppm_from_bytes, ppm_to_bytes,
    save_checkpoint,
};
use mgt_core::model::ModelConfig;
use mgt_core::parallel::map_indexed;
use mgt_core::region_hold::{default_layers, LocalizationMap, RegionHoldSpec};
use mgt_core::rng::CounterRng;
use mgt_core::sampler::{edit_traced, EditRequest, StepTrace};
use mgt_core::text::Vocabulary;
use mgt_core::tokenizer::{decode, encode};
use mgt_core::trainer::{make_synthetic_task, Optimizer, TrainConfig, Trainer};
use mgt_core::{BiasSpec, Image, Model, Palette, TokenGrid};

use crate::{BenchArgs, EditArgs, Failure, SampleArgs, SweepArgs, TrainArgs};

/// Colour levels per channel of the palette written with every checkpoint.
const PALETTE_LEVELS: usize = 4;

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

fn read(path: &Path) -> anyhow::Result<Vec<u8>> {
    fs::read(path).with_context(|| format!("reading {}", path.display()))
}

fn write(path: &Path, bytes: &[u8]) -> anyhow::Result<()> {
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn load_model(path: &Path) -> anyhow::Result<(Model<f32>, Palette)> {
    let (model, palette) = load_checkpoint(read(path)?.as_slice()).with_context(|| format!("loading {}", path.display()))?;
    let palette = palette.with_context(|| format!("{} has no palette", path.display()))?;
    if palette.vocab_size() != model.config.vocab_size {
        bail!("palette has {} entries, model vocabulary {}", palette.vocab_size(), model.config.vocab_size);
    }
    Ok((model, palette))
}

fn read_source(path: &Path, model: &Model<f32>, palette: &Palette) -> anyhow::Result<(Image, TokenGrid)> {
    let image = ppm_from_bytes(&read(path)?).with_context(|| format!("decoding {}", path.display()))?;
    let p = palette.patch_size();
    let (h, w) = (model.config.grid_h * p, model.config.grid_w * p);
    if (image.height, image.width) != (h, w) {
        bail!("{} is {}x{}, the model expects {h}x{w}", path.display(), image.width, image.height);
    }
    let grid = encode(&image, palette)?;
    Ok((image, grid))
}

fn instruction(text: &str, model: &Model<f32>) -> Result<Vec<u32>, Failure> {
    let tokens = Vocabulary::instructions().tokenize(text).map_err(|e| usage(e.to_string()))?;
    if tokens.len() > model.config.max_text_len {
        return Err(usage(format!("instruction has {} words, the model takes {}", tokens.len(), model.config.max_text_len)));
    }
    Ok(tokens)
}

/// Editable tokens: patches where any mask pixel is at least 128.
fn read_mask(path: &Path, grid: &TokenGrid, patch: usize) -> anyhow::Result<Vec<bool>> {
    let mask = pgm_from_bytes(&read(path)?).with_context(|| format!("decoding {}", path.display()))?;
    let (h, w) = (grid.height * patch, grid.width * patch);
    if (mask.height, mask.width) != (h, w) {
        bail!("mask {} is {}x{}, the image is {w}x{h}", path.display(), mask.width, mask.height);
    }
    Ok((0..grid.len())
        .map(|t| {
            let (r, c) = (t / grid.width * patch, t % grid.width * patch);
            (0..patch).any(|dy| (0..patch).any(|dx| mask.data[(r + dy) * w + c + dx] >= 128))
        })
        .collect())
}

/// Decodes `out`, copying source pixels wherever the token is unchanged.
fn render(out: &TokenGrid, source: &TokenGrid, image: &Image, palette: &Palette) -> anyhow::Result<Image> {
    let mut rendered = decode(out, palette)?;
    let p = palette.patch_size();
    let c = image.channels;
    for t in (0..out.len()).filter(|&t| out.tokens[t] == source.tokens[t]) {
        let (r0, c0) = (t / out.width * p, t % out.width * p);
        for y in r0..r0 + p {
            let row = (y * image.width + c0) * c;
            rendered.data[row..row + p * c].copy_from_slice(&image.data[row..row + p * c]);
        }
    }
    Ok(rendered)
}

fn hold_spec(
    lambda: f64,
    layers: Option<&std::ops::Range<usize>>,
    smooth: Option<SmoothSpec>,
    n_layers: usize,
) -> Result<RegionHoldSpec, Failure> {
    let mut spec = RegionHoldSpec::new(lambda).map_err(|e| usage(e.to_string()))?;
    if let Some(r) = layers {
        if r.end > n_layers {
            return Err(usage(format!("hold layers {}..{} exceed the model's {n_layers} layers", r.start, r.end)));
        }
        spec.layers = Some(r.clone().collect());
    }
    spec.smooth = smooth;
    Ok(spec)
}

pub fn train(a: TrainArgs) -> Result<(), Failure> {
    let patch = a.model.patch as usize;
    let config = ModelConfig {
        d_model: a.model.d_model,
        n_layers: a.model.layers,
        n_heads: a.model.heads,
        vocab_size: PALETTE_LEVELS.pow(3),
        text_vocab: Vocabulary::instructions().len(),
        grid_h: a.model.grid,
        grid_w: a.model.grid,
        ffn_dim: a.model.ffn,
        ..ModelConfig::default()
    };
    config.validate().map_err(|e| usage(e.to_string()))?;
    if a.model.grid < 4 {
        return Err(usage("grid must be at least 4"));
    }
    let seed = a.seed.unwrap_or(a.data_seed);
    let train_config = TrainConfig {
        steps: a.steps as usize,
        batch: a.batch as usize,
        lr: a.lr,
        seed,
        gamma_train: a.gamma,
        optimizer: if a.optimizer == "adam" { Optimizer::adam() } else { Optimizer::Sgd },
        localization_weight: a.localization_weight,
        region_mask_fraction: a.region_mask_fraction,
        ..TrainConfig::default()
    };
    train_config.validate().map_err(|e| usage(e.to_string()))?;
    if train_config.lr == 0.0 {
        return Err(usage("lr must be positive"));
    }
    let palette = Palette::flat_colors(PALETTE_LEVELS, patch)?;
    let log_path = a.log.clone().unwrap_or_else(|| {
        let mut p = a.out.clone().into_os_string();
        p.push(".log");
        p.into()
    });

    println!(
        "train steps={} batch={} lr={} seed={seed} data_seed={} count={} d_model={} layers={} grid={}",
        a.steps, a.batch, a.lr, a.data_seed, a.count, config.d_model, config.n_layers, config.grid_h
    );
    let data = make_synthetic_task(a.data_seed, a.count as usize, config.grid_h, config.grid_w)?;
    let model = Model::new(config, seed)?;
    let mut trainer = Trainer::new(model, train_config)?;
    let log = fs::File::create(&log_path).with_context(|| format!("creating {}", log_path.display()))?;
    let mut log = BufWriter::new(log);
    let start = Instant::now();
    let losses = trainer.fit(&data, &mut log)?;
    log.flush()?;
    let mut bytes = Vec::new();
    save_checkpoint(&trainer.model, Some(&palette), &mut bytes)?;
    write(&a.out, &bytes)?;
    println!(
        "done final_loss={:.6} params={} bytes={} seconds={:.1}",
        losses.last().copied().unwrap_or(f64::NAN),
        trainer.model.params.num_params(),
        bytes.len(),
        start.elapsed().as_secs_f64()
    );
    Ok(())
}

fn dump_step(dir: &Path, trace: &StepTrace, layers: &[usize], smooth: Option<&SmoothSpec>, h: usize, w: usize) -> anyhow::Result<()> {
    let m = trace.records.first().map_or(0, |r| r.text_len);
    if m == 0 {
        return Ok(());
    }
    let rows: Vec<usize> = (0..m).collect();
    let stacked = stack_layers(&trace.records, layers, &rows, h, w)?;
    let stacked = match smooth {
        Some(s) => s.apply(&stacked)?,
        None => stacked,
    };
    let mut maps: Vec<(&str, AttnMap)> = vec![("attn", stacked)];
    if let Some(loc) = &trace.localization {
        maps.push(("loc", loc.as_attn_map()));
    }
    for (kind, map) in maps {
        let stem = format!("step{:02}_{kind}", trace.step);
        write(&dir.join(format!("{stem}.mgta")), &map_to_bytes(&map)?)?;
        write(&dir.join(format!("{stem}.pgm")), &pgm_to_bytes(&map_to_gray(&map)))?;
    }
    Ok(())
}

pub fn edit(a: EditArgs) -> Result<(), Failure> {
    BiasSpec::new(a.gamma).map_err(|e| usage(e.to_string()))?;
    if a.hold.lambda.is_none() && (a.hold.hold_layers.is_some() || a.hold.smooth.is_some()) {
        return Err(usage("--hold-layers and --smooth need --lambda"));
    }
    let (model, palette) = load_model(&a.ckpt)?;
    let text = instruction(&a.text, &model)?;
    let n_layers = model.config.n_layers;
    let hold = a
        .hold
        .lambda
        .map(|l| hold_spec(l, a.hold.hold_layers.as_ref(), a.hold.smooth, n_layers))
        .transpose()?;
    let (image, source) = read_source(&a.input, &model, &palette)?;
    let mask = a.mask.as_deref().map(|p| read_mask(p, &source, palette.patch_size())).transpose()?;
    println!(
        "edit steps={} gamma={} seed={} lambda={} mask={}",
        a.steps,
        a.gamma,
        a.seed,
        a.hold.lambda.map_or("off".to_string(), |l| l.to_string()),
        mask.as_ref().map_or("off".to_string(), |m| m.iter().filter(|&&e| e).count().to_string()),
    );
    if let Some(dir) = &a.dump_attn {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let dump_layers: Vec<usize> = match &hold {
        Some(RegionHoldSpec { layers: Some(l), .. }) => l.clone(),
        _ => default_layers(n_layers).collect(),
    };
    let req = EditRequest {
        text: &text,
        gamma: a.gamma,
        steps: a.steps as usize,
        seed: a.seed,
        user_mask: mask.as_deref(),
        region_hold: hold.as_ref(),
        fixed_maps: None,
    };
    let (h, w) = (source.height, source.width);
    let mut dump_err = None;
    let out = edit_traced(&model, &source, &req, |trace| {
        if let (Some(dir), None) = (&a.dump_attn, &dump_err) {
            if let Err(e) = dump_step(dir, trace, &dump_layers, a.hold.smooth.as_ref(), h, w) {
                dump_err = Some(e);
            }
        }
    })?;
    if let Some(e) = dump_err {
        return Err(e.into());
    }
    let rendered = render(&out, &source, &image, &palette)?;
    write(&a.out, &ppm_to_bytes(&rendered)?)?;
    println!("changed_tokens={}", out.hamming(&source));
    Ok(())
}

/// Mean per-token L1 distance between prototype patches.
fn token_l1(a: &TokenGrid, b: &TokenGrid, palette: &Palette) -> f64 {
    let total: f64 = a
        .tokens
        .iter()
        .zip(&b.tokens)
        .map(|(&x, &y)| {
            let (px, py) = (palette.prototype(x as usize), palette.prototype(y as usize));
            px.iter().zip(py).map(|(u, v)| (u - v).abs() as f64).sum::<f64>() / px.len() as f64
        })
        .sum();
    total / a.len() as f64
}

pub fn sweep_lambda(a: SweepArgs) -> Result<(), Failure> {
    BiasSpec::new(a.gamma).map_err(|e| usage(e.to_string()))?;
    let (model, palette) = load_model(&a.ckpt)?;
    let text = instruction(&a.text, &model)?;
    let n_layers = model.config.n_layers;
    let base = hold_spec(0.0, a.hold_layers.as_ref(), a.smooth, n_layers)?;
    let (_, source) = read_source(&a.input, &model, &palette)?;
    println!("sweep-lambda steps={} gamma={} seed={} points={}", a.steps, a.gamma, a.seed, a.grid.0.len());

    // Reference run at lambda 0 (nothing reverts) fixes the per-step maps.
    let mut maps: Vec<LocalizationMap> = Vec::new();
    let req = EditRequest {
        text: &text,
        gamma: a.gamma,
        steps: a.steps as usize,
        seed: a.seed,
        user_mask: None,
        region_hold: Some(&base),
        fixed_maps: None,
    };
    edit_traced(&model, &source, &req, |t| maps.extend(t.localization.clone()))?;

    let rows = map_indexed(a.grid.0.len(), |i| -> mgt_core::Result<(f64, usize, f64)> {
        let lambda = a.grid.0[i];
        let spec = RegionHoldSpec { lambda, ..base.clone() };
        let req = EditRequest { region_hold: Some(&spec), fixed_maps: Some(&maps), ..req.clone() };
        let out = mgt_core::sampler::edit(&model, &source, &req)?;
        Ok((lambda, out.hamming(&source), token_l1(&out, &source, &palette)))
    });
    let mut csv = String::from("lambda,hamming,token_l1\n");
    for row in rows {
        let (lambda, hamming, l1) = row?;
        csv.push_str(&format!("{lambda:.6},{hamming},{l1:.6}\n"));
    }
    write(&a.out, csv.as_bytes())?;
    print!("{csv}");
    Ok(())
}

pub fn filter_bench(a: BenchArgs) -> Result<(), Failure> {
    let methods: Vec<SmoothMethod> = if a.method == "all" {
        SmoothMethod::ALL.to_vec()
    } else {
        vec![a.method.parse().map_err(|e: mgt_core::Error| usage(e.to_string()))?]
    };
    let mut specs = Vec::new();
    for m in methods {
        let strength = if m.is_interpolator() { a.factor as f64 } else { a.strength };
        specs.push(SmoothSpec::new(m, strength).map_err(|e| usage(e.to_string()))?);
    }
    let size = a.size as usize;
    let mut s = CounterRng::new(a.seed).stream(0);
    let map = AttnMap::new(size, size, (0..size * size).map(|_| s.closed01() as f32).collect())?;
    for spec in specs {
        let method = spec.method();
        let fast = spec.apply(&map)?;
        let slow = reference::apply(&spec, &map)?;
        let worst = fast.values.iter().zip(&slow.values).map(|(x, y)| (x - y).abs()).fold(0.0f32, f32::max);
        if worst > 1e-6 {
            return Err(anyhow::anyhow!("{method} disagrees with its reference by {worst:e}").into());
        }
        let start = Instant::now();
        for _ in 0..a.iters {
            std::hint::black_box(spec.apply(std::hint::black_box(&map))?);
        }
        let ns = start.elapsed().as_nanos() / a.iters as u128;
        let identity = method == SmoothMethod::Nearest && spec.strength() == 1.0;
        println!(
            "method={method} strength={} size={size} iters={} ns_per_op={ns} oracle=ok max_err={worst:.1e}{}",
            spec.strength(),
            a.iters,
            if identity { " path=identity" } else { "" }
        );
    }
    Ok(())
}

pub fn sample(a: SampleArgs) -> Result<(), Failure> {
    if a.grid < 4 {
        return Err(usage("grid must be at least 4"));
    }
    let data = make_synthetic_task(a.data_seed, a.index as usize + 1, a.grid, a.grid)?;
    let s = &data[a.index as usize];
    let palette = Palette::flat_colors(PALETTE_LEVELS, a.patch as usize)?;
    write(&a.out, &ppm_to_bytes(&decode(&s.source, &palette)?)?)?;
    if let Some(t) = &a.target {
        write(t, &ppm_to_bytes(&decode(&s.target, &palette)?)?)?;
    }
    println!("{}", Vocabulary::instructions().detokenize(&s.instruction));
    Ok(())
}
