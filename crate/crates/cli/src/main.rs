use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use latentmark::attack::{apply_attack, AttackKind, AttackSpec, AttackSuite};
use latentmark::checkpoint::{load_codec, load_toy_backend, save_codec, save_toy_backend};
use latentmark::config::{BackendChoice, RunConfig};
use latentmark::detector::{detect, DetectionReport};
use latentmark::diffusion::{Condition, GuidanceConfig};
use latentmark::ecc::{RscCode, RscConfig};
use latentmark::eval::{guidance_sweep, inversion_steps_ablation, run_gauntlet, strength_sweep, SweepCurve};
use latentmark::registry::{assign_persistent, IdentityRegistry};
use latentmark::toy::train_toy_backend;
use latentmark::training::{embed, finetune_decoder, pretrain_codec, WatermarkPipeline};
use latentmark::{Backend, BitMessage, Codec, Error, Image};

const EXIT_NOT_DETECTED: u8 = 3;
const EXIT_USAGE: u8 = 64;
const EXIT_DATA: u8 = 65;
const EXIT_INTERNAL: u8 = 70;

/// Multi-bit latent watermarking for diffusion models.
#[derive(Parser, Debug)]
#[command(name = "latentmark", version)]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct GlobalArgs {
    /// TOML run configuration.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Watermark length.
    #[arg(long, global = true, value_parser = ["16", "32", "48"])]
    k: Option<String>,
    /// Significance level of the detection test.
    #[arg(long, global = true)]
    alpha: Option<f64>,
    /// Attack applied before extraction, as KIND:PARAM.
    #[arg(long, global = true, value_name = "KIND:PARAM")]
    attack: Vec<String>,
    /// `toy` or `adapter:NAME`.
    #[arg(long, global = true)]
    backend: Option<String>,
    /// Use the published 34/48 and 24/32 thresholds at alpha = 0.01.
    #[arg(long, global = true)]
    paper_compat: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the toy backend and pretrain the message codec.
    Train {
        #[arg(long, value_enum, default_value_t = Component::All)]
        component: Component,
    },
    /// Fine-tune the codec decoder against attacks and inversion error.
    Finetune {
        /// Where to write the fine-tuned codec (default: overwrite).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a watermarked image.
    Embed {
        #[command(flatten)]
        identity: IdentityArgs,
        /// Register the user if unknown.
        #[arg(long)]
        register: bool,
        #[arg(long)]
        out: PathBuf,
        /// Guidance scale override.
        #[arg(long)]
        guidance: Option<f64>,
        /// `null` or a class index.
        #[arg(long)]
        condition: Option<String>,
    },
    /// Recover watermark bits, the corrected payload and the matching user.
    Extract { image: PathBuf },
    /// Test an image for a specific watermark; exits 3 when not detected.
    Verify {
        image: PathBuf,
        #[command(flatten)]
        identity: IdentityArgs,
    },
    /// Apply the `--attack` perturbations to an image.
    Attack {
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the attack gauntlet and write a report.
    Eval {
        /// Number of watermarked images.
        #[arg(long)]
        n: Option<usize>,
        /// Number of unwatermarked control images.
        #[arg(long)]
        controls: Option<usize>,
        /// Strength sweep, e.g. `gaussian_noise:0,0.02,0.05,0.1`.
        #[arg(long, value_name = "KIND:S1,S2,..")]
        sweep: Vec<String>,
        /// Guidance scales to sweep, e.g. `1,5,10,20`.
        #[arg(long, value_delimiter = ',', value_name = "W1,W2,..")]
        guidance_sweep: Vec<f64>,
        /// Inversion step counts to compare, e.g. `1,2,5,10`.
        #[arg(long, value_delimiter = ',', value_name = "N1,N2,..")]
        inversion_ablation: Vec<usize>,
    },
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
enum Component {
    Backend,
    Codec,
    All,
}

#[derive(Args, Debug, Clone)]
struct IdentityArgs {
    /// Registered user id.
    #[arg(long, conflicts_with = "payload")]
    user: Option<String>,
    /// Identity payload as a bit string.
    #[arg(long)]
    payload: Option<String>,
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Lib(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

type CmdResult = Result<u8, Failure>;

fn exit_code(e: &Error) -> u8 {
    match e.root() {
        Error::Config(_) | Error::Contract(_) | Error::AdapterMissing(_) => EXIT_USAGE,
        Error::Format(_) | Error::Io { .. } | Error::Image(_) | Error::Json(_) => EXIT_DATA,
        _ => EXIT_INTERNAL,
    }
}

struct Ctx {
    cfg: RunConfig,
    attacks: Vec<AttackSpec>,
}

impl Ctx {
    fn new(global: &GlobalArgs) -> Result<Self, Failure> {
        let mut cfg = match &global.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = global.seed {
            cfg.seed = s;
        }
        if let Some(k) = &global.k {
            cfg.k = k.parse().expect("validated by clap");
        }
        if let Some(a) = global.alpha {
            cfg.alpha = a;
        }
        if let Some(b) = &global.backend {
            cfg.backend = b.parse()?;
        }
        cfg.paper_compat |= global.paper_compat;
        cfg.validate()?;
        let attacks = global
            .attack
            .iter()
            .map(|a| a.parse::<AttackSpec>())
            .collect::<latentmark::Result<Vec<_>>>()?;
        Ok(Self { cfg, attacks })
    }

    fn require_toy(&self) -> latentmark::Result<()> {
        match &self.cfg.backend {
            BackendChoice::Toy => Ok(()),
            BackendChoice::Adapter(name) => Err(Error::AdapterMissing(format!("backend {name}"))),
        }
    }

    fn backend(&self) -> latentmark::Result<Backend> {
        self.require_toy()?;
        load_toy_backend(&self.cfg.paths.backend)
    }

    fn codec(&self) -> latentmark::Result<(Codec, Option<RscCode>)> {
        let (codec, meta) = load_codec::<f32>(&self.cfg.paths.codec)?;
        if codec.k() != self.cfg.k {
            return Err(Error::Config(format!(
                "codec checkpoint was trained for k={}, configuration asks for k={}",
                codec.k(),
                self.cfg.k
            )));
        }
        let ecc = match (self.cfg.ecc, meta.ecc) {
            (false, _) => None,
            (true, Some(c)) => Some(RscCode::new(c)?),
            (true, None) => Some(RscCode::new(RscConfig::for_watermark_length(self.cfg.k)?)?),
        };
        Ok((codec, ecc))
    }

    fn registry(&self) -> latentmark::Result<Option<IdentityRegistry>> {
        let p = &self.cfg.paths.registry;
        if p.exists() {
            IdentityRegistry::load(p).map(Some)
        } else {
            Ok(None)
        }
    }

    /// The identity payload named by `--payload` or `--user`.
    fn payload(&self, id: &IdentityArgs, register: bool) -> Result<(BitMessage, Option<String>), Failure> {
        let len = self.cfg.payload_length()?;
        match (&id.payload, &id.user) {
            (Some(bits), _) => {
                let payload: BitMessage = bits.parse().map_err(|e: Error| Failure::Usage(e.to_string()))?;
                if payload.len() != len {
                    let why = if self.cfg.ecc {
                        format!(
                            "the k={} watermark with RSC error correction carries a {len}-bit payload",
                            self.cfg.k
                        )
                    } else {
                        format!("without error correction the payload is the {len}-bit watermark itself")
                    };
                    return Err(Failure::Usage(format!("payload has {} bits; {why}", payload.len())));
                }
                let user = self.registry()?.and_then(|r| r.lookup(&payload).map(str::to_string));
                Ok((payload, user))
            }
            (None, Some(user)) => {
                if let Some(found) = self.registry()?.and_then(|r| r.get(user).map(|i| i.payload.clone())) {
                    return Ok((found, Some(user.clone())));
                }
                if !register {
                    return Err(Failure::Usage(format!("user `{user}` is not registered")));
                }
                let (floor, seed) = (self.cfg.hamming_floor, self.cfg.seed);
                if let Some(dir) = self.cfg.paths.registry.parent() {
                    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                }
                let payload = assign_persistent(&self.cfg.paths.registry, user, "", || {
                    IdentityRegistry::new(len, floor, seed)
                })?;
                Ok((payload, Some(user.clone())))
            }
            (None, None) => Err(Failure::Usage("one of --payload or --user is required".into())),
        }
    }

    fn pipeline<'a>(&self, backend: &'a Backend, codec: &'a Codec, ecc: Option<RscCode>) -> WatermarkPipeline<'a, f32, Backend> {
        WatermarkPipeline::new(backend, codec, self.cfg.inversion_steps, ecc)
    }

    fn load_attacked(&self, image: &Path) -> latentmark::Result<Image> {
        let mut img = Image::load(image)?;
        for spec in &self.attacks {
            img = apply_attack(&img, spec)?;
        }
        Ok(img)
    }
}

fn print_json(v: &Value) {
    println!("{}", serde_json::to_string_pretty(v).expect("values serialise"));
}

fn ensure_parent(path: &Path) -> latentmark::Result<()> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e)),
        _ => Ok(()),
    }
}

fn write_jsonl<T: serde::Serialize>(path: &Path, records: &[T]) -> latentmark::Result<()> {
    ensure_parent(path)?;
    let mut text = String::new();
    for r in records {
        text.push_str(&serde_json::to_string(r)?);
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn cmd_train(ctx: &Ctx, component: Component) -> CmdResult {
    let cfg = &ctx.cfg;
    let mut summary = serde_json::Map::new();
    if component != Component::Codec {
        ctx.require_toy()?;
        let mut toy = cfg.toy.clone();
        toy.data_seed ^= cfg.seed;
        let (backend, report) = train_toy_backend::<f32>(&toy)?;
        ensure_parent(&cfg.paths.backend)?;
        save_toy_backend(&cfg.paths.backend, &backend)?;
        write_jsonl(&cfg.paths.output.join("backend_autoencoder_log.jsonl"), &report.autoencoder)?;
        write_jsonl(&cfg.paths.output.join("backend_denoiser_log.jsonl"), &report.denoiser.entries)?;
        summary.insert(
            "backend".into(),
            json!({
                "path": cfg.paths.backend,
                "denoiser_initial_loss": report.denoiser.initial_loss,
                "denoiser_final_loss": report.denoiser.final_loss,
            }),
        );
    }
    if component != Component::Backend {
        let mut pre = cfg.pretrain.clone();
        pre.k = cfg.k;
        pre.seed ^= cfg.seed;
        let (codec, report) = pretrain_codec::<f32>(&pre)?;
        let ecc = cfg.ecc_config()?;
        ensure_parent(&cfg.paths.codec)?;
        save_codec(&cfg.paths.codec, &codec, ecc.as_ref())?;
        write_jsonl(&cfg.paths.output.join("pretrain_log.jsonl"), &report.log)?;
        summary.insert(
            "codec".into(),
            json!({
                "path": cfg.paths.codec,
                "k": codec.k(),
                "statistics": report.statistics,
            }),
        );
    }
    print_json(&Value::Object(summary));
    Ok(0)
}

fn cmd_finetune(ctx: &Ctx, out: Option<PathBuf>) -> CmdResult {
    let backend = ctx.backend()?;
    let (codec, _) = ctx.codec()?;
    let mut ft = ctx.cfg.finetune.clone();
    ft.seed ^= ctx.cfg.seed;
    ft.inversion_steps = ctx.cfg.inversion_steps;
    let (tuned, report) = finetune_decoder(&codec, &backend, &ft)?;
    let path = out.unwrap_or_else(|| ctx.cfg.paths.codec.clone());
    ensure_parent(&path)?;
    save_codec(&path, &tuned, ctx.cfg.ecc_config()?.as_ref())?;
    write_jsonl(&ctx.cfg.paths.output.join("finetune_log.jsonl"), &report.log)?;
    print_json(&json!({
        "path": path,
        "examples": report.examples,
        "clean_before": report.clean_before,
        "clean_after": report.clean_after,
        "direct_before": report.direct_before,
        "direct_after": report.direct_after,
    }));
    Ok(0)
}

fn cmd_embed(
    ctx: &Ctx,
    identity: &IdentityArgs,
    register: bool,
    out: &Path,
    guidance: Option<f64>,
    condition: Option<&str>,
) -> CmdResult {
    let backend = ctx.backend()?;
    let (codec, ecc) = ctx.codec()?;
    let (payload, user) = ctx.payload(identity, register)?;
    let mut g: GuidanceConfig = ctx.cfg.guidance;
    if let Some(w) = guidance {
        g.scale = w;
    }
    if let Some(c) = condition {
        g.condition = c.parse::<Condition>()?;
    }
    let (image, bits) = embed(&payload, ctx.cfg.seed, &codec, &backend, &g, ecc.as_ref())?;
    ensure_parent(out)?;
    image.save_png(out)?;
    print_json(&json!({
        "image": out,
        "user": user,
        "payload": payload.to_string(),
        "watermark_bits": bits.to_string(),
        "seed": ctx.cfg.seed,
        "guidance": g,
    }));
    Ok(0)
}

fn cmd_extract(ctx: &Ctx, image: &Path) -> CmdResult {
    let backend = ctx.backend()?;
    let (codec, ecc) = ctx.codec()?;
    let img = ctx.load_attacked(image)?;
    let pipeline = ctx.pipeline(&backend, &codec, ecc);
    let bits = pipeline.extract_batch(std::slice::from_ref(&img))?.remove(0);
    let (payload, corrected) = match &pipeline.ecc {
        Some(code) => {
            let (p, c) = code.decode(&bits)?;
            (Some(p), Some(c))
        }
        None => (None, None),
    };
    let lookup = payload.clone().unwrap_or_else(|| bits.clone());
    let user = ctx.registry()?.and_then(|r| r.lookup(&lookup).map(str::to_string));
    print_json(&json!({
        "image": image,
        "bits": bits.to_string(),
        "payload": payload.map(|p| p.to_string()),
        "corrected_errors": corrected,
        "user": user,
        "attacks": ctx.attacks,
    }));
    Ok(0)
}

fn cmd_verify(ctx: &Ctx, image: &Path, identity: &IdentityArgs) -> CmdResult {
    let backend = ctx.backend()?;
    let (codec, ecc) = ctx.codec()?;
    let (payload, user) = ctx.payload(identity, false)?;
    let expected = match &ecc {
        Some(code) => code.encode(&payload)?.bits,
        None => payload,
    };
    let img = ctx.load_attacked(image)?;
    let pipeline = ctx.pipeline(&backend, &codec, ecc);
    let extracted = pipeline.extract_batch(std::slice::from_ref(&img))?.remove(0);
    let mut report: DetectionReport = detect(&expected, &extracted, ctx.cfg.alpha, ctx.cfg.policy(), pipeline.ecc.as_ref())?;
    report.attack_context = ctx.attacks.clone();
    let mut v = serde_json::to_value(&report).map_err(Error::from)?;
    v["user"] = json!(user);
    print_json(&v);
    Ok(if report.detected { 0 } else { EXIT_NOT_DETECTED })
}

fn cmd_attack(ctx: &Ctx, image: &Path, out: &Path) -> CmdResult {
    if ctx.attacks.is_empty() {
        return Err(Failure::Usage("at least one --attack KIND:PARAM is required".into()));
    }
    let img = ctx.load_attacked(image)?;
    ensure_parent(out)?;
    img.save_png(out)?;
    print_json(&json!({ "image": out, "attacks": ctx.attacks }));
    Ok(0)
}

fn parse_sweep(text: &str) -> Result<(AttackKind, Vec<f64>), Failure> {
    let (kind, list) = text
        .split_once(':')
        .ok_or_else(|| Failure::Usage(format!("sweep `{text}` must look like KIND:S1,S2,..")))?;
    let kind: AttackKind = kind.parse()?;
    let strengths = list
        .split(',')
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .map_err(|_| Failure::Usage(format!("sweep strength `{s}` is not a number")))
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok((kind, strengths))
}

fn write_curve(dir: &Path, name: &str, curve: &SweepCurve) -> Result<(), Failure> {
    for (ext, body) in [("tsv", curve.to_table()), ("svg", curve.to_svg())] {
        let path = dir.join(format!("{name}.{ext}"));
        std::fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

fn cmd_eval(
    ctx: &Ctx,
    n: Option<usize>,
    controls: Option<usize>,
    sweeps: &[String],
    guidance_scales: &[f64],
    inversion_steps: &[usize],
) -> CmdResult {
    let sweeps = sweeps.iter().map(|s| parse_sweep(s)).collect::<Result<Vec<_>, _>>()?;
    let backend = ctx.backend()?;
    let (codec, ecc) = ctx.codec()?;
    let mut run = ctx.cfg.eval.clone();
    run.seed ^= ctx.cfg.seed;
    run.alpha = ctx.cfg.alpha;
    run.policy = ctx.cfg.policy();
    run.inversion_steps = ctx.cfg.inversion_steps;
    if let Some(n) = n {
        run.n_images = n;
    }
    if let Some(c) = controls {
        run.n_controls = c;
    }
    if !ctx.attacks.is_empty() {
        run.attacks = ctx.attacks.clone();
    }
    let result = run_gauntlet(&run, &backend, &codec, ecc.as_ref(), &AttackSuite::new())?;
    let dir = &ctx.cfg.paths.output;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let json_path = dir.join("eval.json");
    let table_path = dir.join("eval.txt");
    let table = result.to_table();
    std::fs::write(&json_path, serde_json::to_string_pretty(&result).map_err(Error::from)? + "\n")
        .map_err(|e| Error::io(&json_path, e))?;
    std::fs::write(&table_path, &table).map_err(|e| Error::io(&table_path, e))?;
    print!("{table}");

    let suite = AttackSuite::new();
    for (kind, strengths) in &sweeps {
        let curve = strength_sweep(kind, strengths, &run, &backend, &codec, ecc.as_ref(), &suite)?;
        write_curve(dir, &format!("sweep_{}", kind.name()), &curve)?;
    }
    if !guidance_scales.is_empty() {
        let curve = guidance_sweep(guidance_scales, &run, &backend, &codec, ecc.as_ref())?;
        write_curve(dir, "guidance_sweep", &curve)?;
    }
    if !inversion_steps.is_empty() {
        let curve = inversion_steps_ablation(inversion_steps, 0.02, &run, &backend, &codec, ecc.as_ref())?;
        write_curve(dir, "inversion_ablation", &curve)?;
    }
    Ok(0)
}

fn run(cli: Cli) -> CmdResult {
    let ctx = Ctx::new(&cli.global)?;
    match &cli.command {
        Command::Train { component } => cmd_train(&ctx, *component),
        Command::Finetune { out } => cmd_finetune(&ctx, out.clone()),
        Command::Embed {
            identity,
            register,
            out,
            guidance,
            condition,
        } => cmd_embed(&ctx, identity, *register, out, *guidance, condition.as_deref()),
        Command::Extract { image } => cmd_extract(&ctx, image),
        Command::Verify { image, identity } => cmd_verify(&ctx, image, identity),
        Command::Attack { image, out } => cmd_attack(&ctx, image, out),
        Command::Eval {
            n,
            controls,
            sweep,
            guidance_sweep,
            inversion_ablation,
        } => cmd_eval(&ctx, *n, *controls, sweep, guidance_sweep, inversion_ablation),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE } else { 0 });
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_USAGE)
        }
        Err(Failure::Lib(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
