//! Command-line front end.
//!
//! Failures print one line, `error: kind=<Kind> message=<text>`, and exit
//! with 2 for usage errors or 1 for everything else.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use ndarray::{Array3, ArrayD, Axis, IxDyn};

use crate::adapters::{MaskMode, RegionMask};
use crate::diffusion::{forward_noise, initial_noise, Conditioning, Engine, EngineConfig, RegionKey};
use crate::error::Error;
use crate::fixtures::{cast_annotations, cast_prompt, planted_layout, planted_reference, swatch};
use crate::image::Image;
use crate::io::config::{parse_layers, PromptConfig};
use crate::io::{encode_manifest, fixture_to_tensor, read_pgm, read_ppm, read_tensor, tensor_to_fixture, write_atomic, write_pgm, write_ppm, write_tensor};
use crate::ops::{bilinear_resize, min_max_normalize};
use crate::pipeline::{ablate_regions, generate_multi, layout_pass, mask_iou, region_plan, toy_scores, CharacterInput, GenerationParams, GenerationRequest};
use crate::probe::{record_layer_attention, AttentionFixture, LayerAttentionRecord, Probe};
use crate::segmentation::{segment_regions, SegmentOptions};
use crate::text::RegionQuery;

#[derive(Parser, Debug)]
#[command(name = "character-adapter", version, about = "Character-consistent generation with region-level image adapters")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Segment a reference into region crops, masks and a box manifest.
    Segment {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, default_value_t = 3)]
        regions: usize,
        /// 1-based character whose reference is segmented.
        #[arg(long, default_value_t = 1)]
        character: usize,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Run the text-only layout pass and write each region's map.
    Layout {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, default_value_t = 3)]
        regions: usize,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Run the full pipeline.
    Generate {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        regions: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        /// Also write layout masks, region maps and the box manifest here.
        #[arg(long)]
        masks_dir: Option<PathBuf>,
    },
    /// Dump raw attention records as a `layers x words x h x w` tensor.
    ///
    /// Probes the chosen character's reference when one is given, otherwise
    /// the first step of a text-only run. Half-resolution layers are resized
    /// to the full latent grid.
    Probe {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, default_value_t = 1)]
        character: usize,
        /// Noise timestep for reference probing; defaults to half the schedule.
        #[arg(long)]
        timestep: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Mask IoU between two PGM masks, or toy scores of a generated image.
    Eval {
        #[arg(long, requires = "mask_b")]
        mask_a: Option<PathBuf>,
        #[arg(long)]
        mask_b: Option<PathBuf>,
        #[arg(long, conflicts_with = "mask_a", requires = "prompt")]
        image: Option<PathBuf>,
        #[arg(long = "ref")]
        refs: Vec<PathBuf>,
        #[arg(long)]
        prompt: Option<String>,
    },
    /// Rerun generation with several region counts and report toy scores.
    Ablate {
        #[command(flatten)]
        run: RunArgs,
        /// Comma-separated counts out of 1,2,3,4.
        #[arg(long, value_delimiter = ',', default_value = "1,2,3,4")]
        regions: Vec<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the synthetic scenes used by the test suite.
    Fixtures {
        #[arg(long)]
        out_dir: PathBuf,
        /// Characters in the planted layout.
        #[arg(long, default_value_t = 2)]
        characters: usize,
        #[arg(long, default_value_t = 256)]
        resolution: usize,
        /// Planted references to write alongside the layout.
        #[arg(long, default_value_t = 1)]
        references: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Args, Debug, Clone)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Reference raster per character, in order; overrides the config's paths.
    #[arg(long = "ref")]
    refs: Vec<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    cfg_scale: Option<f32>,
    #[arg(long)]
    lambda: Option<f32>,
    #[arg(long)]
    gamma1: Option<f32>,
    #[arg(long)]
    gamma2: Option<f32>,
    #[arg(long)]
    mask_mode: Option<MaskMode>,
    /// Comma-separated 1-based layers receiving adapters.
    #[arg(long)]
    fused_layers: Option<String>,
    /// Planted layout attention replacing the live layout run.
    #[arg(long)]
    layout_fixture: Option<PathBuf>,
    /// Planted segmentation attention, one per character in order.
    #[arg(long = "seg-fixture")]
    seg_fixtures: Vec<PathBuf>,
}

enum Failure {
    Usage(String),
    Domain(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Domain(e)
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn error_line(kind: &str, message: &str) -> String {
    let flat: Vec<&str> = message.split_whitespace().collect();
    format!("error: kind={kind} message={}", flat.join(" "))
}

/// Parses `args` (program name first), runs the command and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return 0;
        }
        Err(e) => {
            let rendered = e.render().to_string();
            let body: Vec<&str> = rendered.lines().take_while(|l| !l.starts_with("Usage:")).collect();
            let message = body.join(" ");
            eprintln!("{}", error_line("UsageError", message.trim_start_matches("error:")));
            return 2;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(Failure::Usage(m)) => {
            eprintln!("{}", error_line("UsageError", &m));
            2
        }
        Err(Failure::Domain(e)) => {
            eprintln!("{}", error_line(e.kind(), &e.to_string()));
            1
        }
    }
}

struct Loaded {
    engine: Engine,
    config: PromptConfig,
    params: GenerationParams,
    references: Vec<Option<Image>>,
    seg_fixtures: Vec<Option<AttentionFixture>>,
    layout_fixture: Option<AttentionFixture>,
}

impl Loaded {
    fn request(&self) -> CliResult<GenerationRequest> {
        let specs = self.config.specs()?;
        let mut characters = Vec::with_capacity(specs.len());
        for (j, spec) in specs.into_iter().enumerate() {
            let reference = self.references[j].clone().ok_or_else(|| Failure::Usage(format!("no reference image for character {}", j + 1)))?;
            characters.push(CharacterInput {
                spec,
                reference,
                segmentation_fixture: self.seg_fixtures[j].clone(),
            });
        }
        Ok(GenerationRequest {
            characters,
            params: self.params.clone(),
            layout_fixture: self.layout_fixture.clone(),
        })
    }
}

fn load(run: &RunArgs, regions: Option<usize>) -> CliResult<Loaded> {
    let engine = Engine::new(EngineConfig::default())?;
    let config = PromptConfig::load(&run.config)?;
    let mut params = config.resolved_params(engine.config().latent_factor)?;
    if let Some(v) = run.seed {
        params.seed = v;
    }
    if let Some(v) = run.steps {
        params.steps = v;
    }
    if let Some(v) = run.cfg_scale {
        params.cfg_scale = v;
    }
    if let Some(v) = run.lambda {
        params.lambda = v;
    }
    if let Some(v) = run.gamma1 {
        params.gamma1 = v;
    }
    if let Some(v) = run.gamma2 {
        params.gamma2 = v;
    }
    if let Some(v) = run.mask_mode {
        params.mask_mode = v;
    }
    if let Some(v) = &run.fused_layers {
        params.fused_layers = Some(parse_layers(v).map_err(Failure::Usage)?);
    }
    if let Some(v) = regions {
        params.regions = v;
    }

    let count = config.characters.len();
    if run.refs.len() > count || run.seg_fixtures.len() > count {
        return Err(Failure::Usage(format!("config defines {count} characters")));
    }
    let base = run.config.parent().unwrap_or(Path::new("."));
    let mut references = Vec::with_capacity(count);
    for (j, block) in config.characters.iter().enumerate() {
        let path = match (run.refs.get(j), &block.reference) {
            (Some(p), _) => Some(p.clone()),
            (None, Some(rel)) => Some(base.join(rel)),
            (None, None) => None,
        };
        references.push(path.map(|p| read_ppm(&p)).transpose()?);
    }
    let mut seg_fixtures: Vec<Option<AttentionFixture>> = run.seg_fixtures.iter().map(|p| read_fixture(p).map(Some)).collect::<CliResult<_>>()?;
    seg_fixtures.resize(count, None);
    let layout_fixture = run.layout_fixture.as_deref().map(read_fixture).transpose()?;

    eprintln!("config={} characters={count}", run.config.display());
    eprintln!("resolved {}", params.describe(&engine));
    Ok(Loaded {
        engine,
        config,
        params,
        references,
        seg_fixtures,
        layout_fixture,
    })
}

fn read_fixture(path: &Path) -> CliResult<AttentionFixture> {
    Ok(tensor_to_fixture(&read_tensor(path)?)?)
}

fn create_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(Error::from)?;
    Ok(())
}

fn write_map(dir: &Path, key: RegionKey, values: &ndarray::Array2<f32>) -> CliResult<()> {
    write_tensor(&dir.join(format!("{key}.catn")), &values.clone().into_dyn())?;
    write_pgm(&dir.join(format!("{key}.pgm")), &min_max_normalize(values.view()))?;
    Ok(())
}

fn all_queries(loaded: &Loaded) -> CliResult<Vec<RegionQuery>> {
    let mut out = Vec::new();
    for spec in loaded.config.specs()? {
        out.extend(region_plan(&spec, loaded.params.regions)?);
    }
    Ok(out)
}

fn dispatch(command: Command) -> CliResult<()> {
    match command {
        Command::Segment { run, regions, character, out_dir } => {
            let loaded = load(&run, Some(regions))?;
            let specs = loaded.config.specs()?;
            let spec = specs.get(character.wrapping_sub(1)).ok_or_else(|| Failure::Usage(format!("no character {character}")))?;
            let reference = loaded.references[character - 1].as_ref().ok_or_else(|| Failure::Usage(format!("no reference image for character {character}")))?;
            let mut options = SegmentOptions::for_engine(&loaded.engine, loaded.params.seed);
            options.gamma1 = loaded.params.gamma1;
            if let Some(t) = loaded.params.t_probe {
                options.probe_timesteps = vec![t];
            }
            let plan = region_plan(spec, regions)?;
            let crops = segment_regions(reference, spec, &plan, &loaded.engine, &options, loaded.seg_fixtures[character - 1].as_ref())
                .map_err(|e| Error::SegmentationFailed { character, source: Box::new(e) })?;
            create_dir(&out_dir)?;
            let factor = loaded.engine.config().latent_factor;
            let latent_size = (reference.height() / factor, reference.width() / factor);
            for crop in &crops {
                write_ppm(&out_dir.join(format!("{}.ppm", crop.key)), &crop.pixels)?;
                write_pgm(&out_dir.join(format!("{}.pgm", crop.key)), &crate::fixtures::box_mask(crop.latent_box, latent_size))?;
            }
            let boxes: Vec<_> = crops.iter().map(|c| (c.key, c.pixel_box)).collect();
            write_atomic(&out_dir.join("boxes.txt"), encode_manifest(&boxes).as_bytes())?;
            println!("segmented {} regions into {}", crops.len(), out_dir.display());
        }
        Command::Layout { run, regions, out_dir } => {
            let loaded = load(&run, Some(regions))?;
            let queries = all_queries(&loaded)?;
            let layout = layout_pass(&loaded.config.prompt, &queries, &loaded.engine, &loaded.params, loaded.layout_fixture.as_ref())?;
            create_dir(&out_dir)?;
            for (key, map) in &layout.region_maps {
                write_map(&out_dir, *key, &map.values)?;
            }
            write_ppm(&out_dir.join("layout.ppm"), &loaded.engine.decode_latent(&layout.latent))?;
            println!("wrote {} region maps to {}", layout.region_maps.len(), out_dir.display());
        }
        Command::Generate { run, regions, out, masks_dir } => {
            let loaded = load(&run, regions)?;
            let request = loaded.request()?;
            let artifacts = generate_multi(&request, &loaded.engine)?;
            write_ppm(&out, &artifacts.image)?;
            if let Some(dir) = masks_dir {
                create_dir(&dir)?;
                for mask in &artifacts.layout_masks {
                    write_pgm(&dir.join(format!("{}.pgm", mask.key)), &mask.values)?;
                }
                for (key, map) in &artifacts.layout_maps {
                    write_tensor(&dir.join(format!("{key}.catn")), &map.values.clone().into_dyn())?;
                }
                write_atomic(&dir.join("boxes.txt"), encode_manifest(&artifacts.boxes()).as_bytes())?;
            }
            let t = artifacts.timing;
            eprintln!(
                "timing segmentation={:.3}s layout={:.3}s sampling={:.3}s total={:.3}s",
                t.segmentation.as_secs_f64(),
                t.layout.as_secs_f64(),
                t.sampling.as_secs_f64(),
                t.total.as_secs_f64()
            );
            println!("wrote {}", out.display());
        }
        Command::Probe { run, character, timestep, out } => {
            let loaded = load(&run, None)?;
            let engine = &loaded.engine;
            let (_, text) = engine.embed_prompt(&loaded.config.prompt)?;
            let cond = Conditioning::text_only(text);
            let total = engine.schedule().total_steps();
            let reference = loaded.references.get(character.wrapping_sub(1)).ok_or_else(|| Failure::Usage(format!("no character {character}")))?;
            let (latent, t) = match reference {
                Some(image) => {
                    let t = timestep.unwrap_or(total / 2);
                    let z0 = engine.encode_image(image)?;
                    let eps = initial_noise(z0.shape(), loaded.params.seed);
                    (forward_noise(&z0, t, engine.schedule(), &eps.values)?.values, t)
                }
                None => {
                    let c = engine.config().unet.latent_channels;
                    let (h, w) = loaded.params.latent_size;
                    let sigma = engine.schedule().sigma(total) as f32;
                    let x = initial_noise((c, h, w), loaded.params.seed).values * sigma;
                    (x / (1.0 + sigma * sigma).sqrt(), total)
                }
            };
            let mut probe = match &loaded.layout_fixture {
                Some(f) => Probe::injecting(f.clone()),
                None => Probe::recording(),
            };
            let records = record_layer_attention(engine.unet(), &latent, t, &cond, &mut probe)?;
            let tensor = records_to_tensor(&records)?;
            write_tensor(&out, &tensor)?;
            println!("wrote {} layer records at t={t} to {}", records.len(), out.display());
        }
        Command::Eval { mask_a, mask_b, image, refs, prompt } => match (mask_a, mask_b, image) {
            (Some(a), Some(b), None) => {
                let key = RegionKey::new(1, crate::text::RegionLabel::Whole);
                let a = RegionMask::hard(key, read_pgm(&a)?);
                let b = RegionMask::hard(key, read_pgm(&b)?);
                println!("iou={:?}", mask_iou(&a, &b)?);
            }
            (None, None, Some(path)) => {
                let engine = Engine::new(EngineConfig::default())?;
                let generated = read_ppm(&path)?;
                let references = refs.iter().map(|p| read_ppm(p)).collect::<crate::error::Result<Vec<_>>>()?;
                let prompt = prompt.ok_or_else(|| Failure::Usage("--prompt is required with --image".into()))?;
                let scores = toy_scores(&engine, &prompt, &references.iter().collect::<Vec<_>>(), &generated)?;
                println!("toy_text_score={:?} toy_image_score={:?}", scores.text_score, scores.image_score);
            }
            _ => return Err(Failure::Usage("eval needs --mask-a and --mask-b, or --image".into())),
        },
        Command::Ablate { run, regions, out } => {
            let loaded = load(&run, None)?;
            let request = loaded.request()?;
            let report = ablate_regions(&request, &loaded.engine, &regions)?;
            let table = report.to_table();
            if let Some(path) = out {
                write_atomic(&path, table.as_bytes())?;
            }
            print!("{table}");
        }
        Command::Fixtures { out_dir, characters, resolution, references, seed } => {
            let engine = Engine::new(EngineConfig::default())?;
            let factor = engine.config().latent_factor;
            if resolution == 0 || !resolution.is_multiple_of(2 * factor) {
                return Err(Error::NotDivisible { width: resolution, height: resolution, factor: 2 * factor }.into());
            }
            let side = resolution / factor;
            create_dir(&out_dir)?;
            let scene = planted_layout(characters, (side, side), engine.num_layers())?;
            write_tensor(&out_dir.join("layout.catn"), &fixture_to_tensor(&scene.fixture)?)?;
            let truth: Vec<_> = scene.truth.iter().map(|(k, b)| (*k, *b)).collect();
            write_atomic(&out_dir.join("layout_truth.txt"), encode_manifest(&truth).as_bytes())?;
            let mut cfg = format!("prompt = {}\nresolution = {resolution}\nseed = {seed}\n", cast_prompt(characters));
            for j in 1..=characters {
                let name = format!("char{j}.ppm");
                write_ppm(&out_dir.join(&name), &swatch(j, resolution, resolution))?;
                cfg.push_str("\n[character]\n");
                for (label, text) in cast_annotations(j) {
                    cfg.push_str(&format!("{label} = {text}\n"));
                }
                cfg.push_str(&format!("reference = {name}\n"));
            }
            write_atomic(&out_dir.join("prompt.cfg"), cfg.as_bytes())?;
            for i in 0..references {
                let r = planted_reference(seed.wrapping_add(i as u64), (side, side), engine.num_layers(), factor)?;
                write_ppm(&out_dir.join(format!("ref{i}.ppm")), &r.image)?;
                write_tensor(&out_dir.join(format!("ref{i}.catn")), &fixture_to_tensor(&r.fixture)?)?;
                let truth: Vec<_> = r.truth.iter().map(|(k, b)| (*k, *b)).collect();
                write_atomic(&out_dir.join(format!("ref{i}_truth.txt")), encode_manifest(&truth).as_bytes())?;
            }
            println!("wrote fixtures to {}", out_dir.display());
        }
    }
    Ok(())
}

/// Stacks records of one pass into `layers x words x h x w`, resizing every
/// layer to the largest grid.
fn records_to_tensor(records: &[LayerAttentionRecord]) -> CliResult<ArrayD<f32>> {
    let first = records.first().ok_or(Error::EmptyRecords)?;
    let (h, w) = records.iter().map(|r| r.size()).max().expect("non-empty");
    let words = first.words();
    let mut out = ArrayD::zeros(IxDyn(&[records.len(), words, h, w]));
    for (k, r) in records.iter().enumerate() {
        let mut layer = Array3::zeros((words, h, w));
        for (i, mut slot) in layer.axis_iter_mut(Axis(0)).enumerate() {
            slot.assign(&bilinear_resize(r.word_map(i + 1).expect("in range"), h, w));
        }
        out.index_axis_mut(Axis(0), k).assign(&layer.into_dyn());
    }
    Ok(out)
}
