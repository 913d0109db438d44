use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use pns::attack::victims::{catalog, MatrixCell, DEMO_CHAINS, SLED_CHAIN};
use pns::attack::{run_attack_matrix, run_campaign, AttackSpec, Victim, VictimCatalog};
use pns::config::Config;
use pns::corpus;
use pns::gadgets::{chain_survival, resolve_chains, scan_gadgets, DEFAULT_MAX_LEN};
use pns::image::{assemble, hex32, insert_traps, load, parse_hex32, save, ProgramImage};
use pns::machine::{ContextHook, ContextOp, MachineState, Termination};

#[derive(Parser)]
#[command(name = "pns", version, about = "Phantom name system simulator")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Assemble a source file into an image
    Asm {
        src: PathBuf,
        #[arg(short, long)]
        out: PathBuf,
        /// Plant a TRAP before every basic block
        #[arg(long)]
        traps: bool,
    },
    /// Run an image to completion
    Run {
        image: PathBuf,
        /// Without a config, trap support follows the image
        #[arg(long)]
        config: Option<PathBuf>,
        /// Write the run result here instead of stdout
        #[arg(long)]
        json: Option<PathBuf>,
        /// Save context when execution reaches AT, as AT:BUF in hex
        #[arg(long, value_name = "AT:BUF")]
        save_context: Vec<String>,
        /// Restore context when execution reaches AT, as AT:BUF in hex
        #[arg(long, value_name = "AT:BUF")]
        restore_context: Vec<String>,
    },
    /// Run an attack campaign, or the whole attack matrix
    Attack {
        victim: Option<PathBuf>,
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        trials: Option<u64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Catalog of victims and cells, as written by `export`
        #[arg(long)]
        matrix: Option<PathBuf>,
    },
    /// Scan an image for gadgets and report chain survival
    Gadgets {
        image: PathBuf,
        /// JSON list of chains, each a list of symbols or 0x addresses
        #[arg(long)]
        chains: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Write the corpus, victims, specs, chains and a default config to DIR
    Export { dir: PathBuf },
}

/// Failures that map to exit code 2.
struct InputError(anyhow::Error);

impl<E: Into<anyhow::Error>> From<E> for InputError {
    fn from(e: E) -> Self {
        InputError(e.into())
    }
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn json<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("reports serialize");
    s.push('\n');
    s
}

fn config(path: Option<&Path>) -> Result<Config> {
    let cfg = match path {
        Some(p) => Config::from_json(&read(p)?)?,
        None => Config::default(),
    };
    Ok(cfg.with_env()?)
}

fn load_image(path: &Path, cfg: &Config) -> Result<ProgramImage> {
    load(&read(path)?, &cfg.phantom_config()).map_err(|e| anyhow!("{}: {e}", path.display()))
}

fn hook(text: &str, op: ContextOp) -> Result<ContextHook> {
    let (at, buf) = text.split_once(':').ok_or_else(|| anyhow!("expected AT:BUF, got '{text}'"))?;
    let at = parse_hex32(at).map_err(|e| anyhow!(e))?;
    let buf = parse_hex32(buf).map_err(|e| anyhow!(e))?;
    Ok(ContextHook { at, op, buf })
}

fn cmd_asm(src: &Path, out: &Path, traps: bool) -> Result<ExitCode, InputError> {
    let text = read(src)?;
    let mut image = assemble(&text).map_err(|e| anyhow!("{}: {e}", src.display()))?;
    if traps {
        image = insert_traps(&image).map_err(|e| anyhow!("{}: {e}", src.display()))?;
    }
    write(out, &save(&image))?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_run(
    image: &Path,
    cfg_path: Option<&Path>,
    out: Option<&Path>,
    saves: &[String],
    restores: &[String],
) -> Result<ExitCode, InputError> {
    let cfg = config(cfg_path)?;
    let img = load_image(image, &cfg)?;
    let mut mcfg = cfg.to_machine();
    if cfg_path.is_none() {
        mcfg = mcfg.for_image(&img);
    }
    let mut m = MachineState::reset(&img, cfg.seed(), mcfg)?;
    for s in saves {
        m.add_hook(hook(s, ContextOp::Save)?);
    }
    for r in restores {
        m.add_hook(hook(r, ContextOp::Restore)?);
    }
    let r = m.run(cfg.budgets.max_cycles);
    match out {
        Some(path) => {
            write(path, &r.to_json())?;
            for v in &r.out {
                println!("{}", hex32(*v));
            }
        }
        None => print!("{}", r.to_json()),
    }
    Ok(match r.termination {
        Termination::Halt => ExitCode::SUCCESS,
        Termination::Exception => ExitCode::from(3),
        Termination::BudgetExceeded => ExitCode::from(4),
    })
}

/// On-disk catalog: victim images by path relative to the catalog file.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CatalogFile {
    victims: BTreeMap<String, PathBuf>,
    cells: Vec<MatrixCell>,
}

fn load_catalog(path: &Path, cfg: &Config) -> Result<VictimCatalog> {
    let file: CatalogFile = serde_json::from_str(&read(path)?).with_context(|| format!("parsing {}", path.display()))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut victims = BTreeMap::new();
    for (name, rel) in file.victims {
        let img = load_image(&base.join(&rel), cfg)?;
        victims.insert(name.clone(), Victim::from_image(&name, String::new(), img));
    }
    for cell in &file.cells {
        if !victims.contains_key(&cell.victim) {
            bail!("cell {} {} names unknown victim '{}'", cell.vector, cell.payload, cell.victim);
        }
    }
    Ok(VictimCatalog { victims, cells: file.cells })
}

#[derive(Serialize)]
struct CampaignDoc<'a, T: Serialize> {
    config: &'a Config,
    seed: u64,
    trials: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    spec: Option<&'a AttackSpec>,
    result: T,
}

fn cmd_attack(
    victim: Option<&Path>,
    spec: Option<&Path>,
    trials: Option<u64>,
    seed: u64,
    cfg_path: Option<&Path>,
    matrix: Option<&Path>,
) -> Result<ExitCode, InputError> {
    let cfg = config(cfg_path)?;
    let trials = trials.unwrap_or(cfg.budgets.trials);
    if trials == 0 {
        return Err(anyhow!("--trials must be positive").into());
    }
    let mcfg = cfg.to_machine();
    let max_cycles = cfg.budgets.max_cycles;
    if let Some(cat) = matrix {
        let catalog = load_catalog(cat, &cfg)?;
        let report = run_attack_matrix(&catalog, &mcfg, trials, seed, max_cycles)?;
        print!("{}", json(&CampaignDoc { config: &cfg, seed, trials, spec: None, result: report }));
        return Ok(ExitCode::SUCCESS);
    }
    let (Some(victim), Some(spec_path)) = (victim, spec) else {
        return Err(anyhow!("attack needs a victim image and --spec, or --matrix").into());
    };
    let img = load_image(victim, &cfg)?;
    let spec: AttackSpec =
        serde_json::from_str(&read(spec_path)?).with_context(|| format!("parsing {}", spec_path.display()))?;
    let name = victim.file_stem().and_then(|s| s.to_str()).unwrap_or("victim");
    let v = Victim::from_image(name, String::new(), img);
    let result = run_campaign(&v, &spec, trials, seed, &mcfg, max_cycles)?;
    print!("{}", json(&CampaignDoc { config: &cfg, seed, trials, spec: Some(&spec), result }));
    Ok(ExitCode::SUCCESS)
}

#[derive(Serialize)]
struct ScanEntry {
    start: String,
    text: String,
}

#[derive(Serialize)]
struct ScanDoc {
    gadgets: usize,
    scan: Vec<ScanEntry>,
}

fn cmd_gadgets(image: &Path, chains: Option<&Path>, cfg_path: Option<&Path>) -> Result<ExitCode, InputError> {
    let cfg = config(cfg_path)?;
    let img = load_image(image, &cfg)?;
    match chains {
        None => {
            let scan: Vec<ScanEntry> = scan_gadgets(&img, DEFAULT_MAX_LEN)
                .iter()
                .map(|g| ScanEntry { start: hex32(g.start), text: g.text() })
                .collect();
            print!("{}", json(&ScanDoc { gadgets: scan.len(), scan }));
        }
        Some(path) => {
            let names: Vec<Vec<String>> =
                serde_json::from_str(&read(path)?).with_context(|| format!("parsing {}", path.display()))?;
            let chains = resolve_chains(&names, &img)?;
            let report = chain_survival(&chains, cfg.phantom.delta, &img)?;
            print!("{}", json(&report));
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_export(dir: &Path) -> Result<ExitCode, InputError> {
    for (name, src) in corpus::PROGRAMS {
        let plain = assemble(src).map_err(|e| anyhow!("{name}: {e}"))?;
        let trapped = insert_traps(&plain).map_err(|e| anyhow!("{name}: {e}"))?;
        write(&dir.join(format!("corpus/{name}.s")), src)?;
        write(&dir.join(format!("corpus/{name}.json")), &save(&plain))?;
        write(&dir.join(format!("corpus/{name}.traps.json")), &save(&trapped))?;
    }
    let cat = catalog();
    let mut victims = BTreeMap::new();
    for (name, v) in &cat.victims {
        write(&dir.join(format!("victims/{name}.s")), &v.source)?;
        write(&dir.join(format!("victims/{name}.json")), &save(&v.image))?;
        victims.insert(name.clone(), PathBuf::from(format!("victims/{name}.json")));
    }
    for cell in &cat.cells {
        write(&dir.join(format!("specs/{}_{}.json", cell.vector, cell.payload)), &json(&cell.spec))?;
    }
    write(&dir.join("catalog.json"), &json(&CatalogFile { victims, cells: cat.cells.clone() }))?;
    write(&dir.join("chains/demo.json"), &json(&DEMO_CHAINS))?;
    write(&dir.join("chains/sled.json"), &json(&[SLED_CHAIN]))?;
    write(&dir.join("config.json"), &json(&Config::default()))?;
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let r = match &cli.cmd {
        Cmd::Asm { src, out, traps } => cmd_asm(src, out, *traps),
        Cmd::Run { image, config, json, save_context, restore_context } => {
            cmd_run(image, config.as_deref(), json.as_deref(), save_context, restore_context)
        }
        Cmd::Attack { victim, spec, trials, seed, config, matrix } => {
            cmd_attack(victim.as_deref(), spec.as_deref(), *trials, *seed, config.as_deref(), matrix.as_deref())
        }
        Cmd::Gadgets { image, chains, config } => cmd_gadgets(image, chains.as_deref(), config.as_deref()),
        Cmd::Export { dir } => cmd_export(dir),
    };
    match r {
        Ok(code) => code,
        Err(InputError(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
