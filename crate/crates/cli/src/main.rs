use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use gol_core::config::PipelineConfig;
use gol_core::cvae::{train_cvae, CvaeModel};
use gol_core::evaluation::{
    cmc_csv, cmc_curve, kfold_csv, kfold_robustness, occlusion_sweep, predictions_csv, rank1_accuracy, SweepPlan,
};
use gol_core::keypose::KeyPoseSet;
use gol_core::occlusion::{occlude_sequence_with_mask, sample_mask};
use gol_core::pipeline::{
    assign_poses, cvae_corpus, fit_keyposes, gallery_geis, latent_sequences, par_map, TrainedPipeline,
};
use gol_core::plot::{plot_cmc, plot_kfold, plot_sweep};
use gol_core::recognizer::train_geinet;
use gol_core::silhouette::{
    load_manifest, load_sequence, save_frame_png, save_sequence, write_manifest, write_text, GaitSequence,
    ManifestEntry,
};
use gol_core::synth::{generate_corpus, CorpusSpec};
use gol_core::temporal::{make_training_windows, reconstruct_sequence, train_bilstm, BilstmModel};
use gol_core::{Error, Result};

const MANIFEST: &str = "manifest.txt";

#[derive(Parser)]
#[command(name = "gol", version, about = "Gait occlusion detection, reconstruction and recognition")]
#[command(arg_required_else_help = true)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Pipeline config file (`section.key = value` lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed; overrides every component seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Checkpoint directory.
    #[arg(long, global = true, env = "GOL_CACHE", default_value = ".gol-cache")]
    models: PathBuf,
    /// Worker threads for per-sequence stages.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    /// Output root. Training commands default to the checkpoint directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct Data {
    /// Manifest file, dataset directory holding `manifest.txt`, or one sequence directory.
    #[arg(long)]
    data: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Render a labelled synthetic-walker corpus.
    SynthData {
        #[arg(long)]
        subjects: Option<usize>,
        #[arg(long)]
        seqs: Option<usize>,
        #[arg(long)]
        frames: Option<usize>,
        #[arg(long)]
        noise: Option<f64>,
    },
    /// Fit the PCA subspace and key poses.
    BuildKeyposes(Data),
    /// Train the conditional VAE.
    TrainCvae(Data),
    /// Train the bidirectional LSTM latent filter.
    TrainBilstm(Data),
    /// Train the GEI classifier on gallery sequences.
    TrainGeinet(Data),
    /// Map frames to key poses and the occlusion state.
    Label(Data),
    /// Blank frames with a Bernoulli mask.
    Occlude {
        #[command(flatten)]
        data: Data,
        #[arg(long)]
        degree: f64,
    },
    /// Rebuild frames labelled occluded.
    Reconstruct {
        #[command(flatten)]
        data: Data,
        /// Unoccluded sequences aligned with --data, for dice scores.
        #[arg(long)]
        ground_truth: Option<PathBuf>,
    },
    /// Identify probe sequences and write CMC reports.
    Evaluate {
        #[command(flatten)]
        data: Data,
        #[arg(long)]
        ground_truth: Option<PathBuf>,
    },
    /// Accuracy against occlusion degree.
    Sweep(Data),
    /// Stratified k-fold robustness; retrains the pipeline per fold.
    Kfold {
        #[command(flatten)]
        data: Data,
        /// Comma-separated fold counts.
        #[arg(long, value_delimiter = ',')]
        k: Option<Vec<usize>>,
    },
}

fn load_config(g: &Global) -> Result<PipelineConfig> {
    let cfg = match &g.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    match g.seed {
        Some(s) => cfg.with_seed(s).synced(),
        None => cfg.synced(),
    }
}

fn load_data(path: &Path, cfg: &PipelineConfig) -> Result<Vec<GaitSequence>> {
    if path.is_file() {
        load_manifest(path, cfg.geometry)
    } else if path.join(MANIFEST).is_file() {
        load_manifest(&path.join(MANIFEST), cfg.geometry)
    } else {
        Ok(vec![load_sequence(path, cfg.geometry)?])
    }
}

fn mkdir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))
}

fn require_out(g: &Global) -> Result<PathBuf> {
    g.out
        .clone()
        .ok_or_else(|| Error::InvalidArgument("--out is required for this command".into()))
}

fn entry(seq: &GaitSequence, dir: &str) -> ManifestEntry {
    ManifestEntry {
        sequence_id: seq.id().to_string(),
        subject_label: seq.subject().unwrap_or("-").to_string(),
        path: PathBuf::from(dir),
    }
}

/// Writes sequences under `out/<id>/` with a manifest.
fn save_dataset(seqs: &[GaitSequence], out: &Path) -> Result<()> {
    mkdir(out)?;
    let mut entries = Vec::with_capacity(seqs.len());
    for s in seqs {
        save_sequence(s, &out.join(s.id()))?;
        entries.push(entry(s, s.id()));
    }
    write_manifest(&out.join(MANIFEST), &entries)
}

fn synth_data(
    g: &Global,
    cfg: &PipelineConfig,
    subjects: Option<usize>,
    seqs: Option<usize>,
    frames: Option<usize>,
    noise: Option<f64>,
) -> Result<()> {
    let out = require_out(g)?;
    let spec = CorpusSpec {
        subjects: subjects.unwrap_or(cfg.synth.subjects),
        sequences_per_subject: seqs.unwrap_or(cfg.synth.sequences_per_subject),
        frames: frames.unwrap_or(cfg.synth.frames),
        noise_rate: noise.unwrap_or(cfg.synth.noise_rate),
        geometry: cfg.geometry,
        seed: cfg.seed,
    };
    let corpus = generate_corpus(&spec)?;
    save_dataset(&corpus, &out)?;
    // Gallery/probe split by sequence index within each subject.
    let split = cfg.synth.gallery_sequences.min(spec.sequences_per_subject);
    let (mut gallery, mut probes) = (Vec::new(), Vec::new());
    for (i, s) in corpus.iter().enumerate() {
        let e = entry(s, s.id());
        if i % spec.sequences_per_subject < split {
            gallery.push(e);
        } else {
            probes.push(e);
        }
    }
    write_manifest(&out.join("gallery.txt"), &gallery)?;
    write_manifest(&out.join("probes.txt"), &probes)?;
    println!("wrote {} sequences to {}", corpus.len(), out.display());
    Ok(())
}

fn build_keyposes(g: &Global, cfg: &PipelineConfig, data: &Data) -> Result<()> {
    let out = g.out.clone().unwrap_or_else(|| g.models.clone());
    let seqs = load_data(&data.data, cfg)?;
    let kp = fit_keyposes(&seqs, cfg)?;
    mkdir(&out)?;
    kp.save(&out.join("keyposes.bin"))?;
    write_text(&out.join("keyposes_report.txt"), &kp.report())?;
    for k in 0..kp.k() {
        save_frame_png(&kp.decode(k)?, &out.join(format!("keypose_{:02}.png", k + 1)))?;
    }
    cfg.save(&out.join("config_keyposes.txt"))?;
    println!("built {} key poses, tau {:.6}", kp.k(), kp.tau());
    Ok(())
}

fn train_cvae_cmd(g: &Global, cfg: &PipelineConfig, data: &Data) -> Result<()> {
    let out = g.out.clone().unwrap_or_else(|| g.models.clone());
    let kp = KeyPoseSet::load(&g.models.join("keyposes.bin"))?;
    check_k(cfg, &kp)?;
    let seqs = load_data(&data.data, cfg)?;
    let corpus = cvae_corpus(&seqs, &kp)?;
    let (model, log) = train_cvae(&corpus, &cfg.cvae)?;
    mkdir(&out)?;
    model.save(&out.join("cvae.bin"))?;
    log.save(&out.join("cvae_loss.csv"))?;
    cfg.save(&out.join("config_cvae.txt"))?;
    if let Some(last) = log.epochs.last() {
        println!("cvae trained on {} frames, final l_total {:.6}", corpus.len(), last.l_total);
    }
    Ok(())
}

fn check_k(cfg: &PipelineConfig, kp: &KeyPoseSet) -> Result<()> {
    if kp.k() != cfg.keypose.k {
        return Err(Error::DimensionMismatch {
            expected: cfg.keypose.k,
            actual: kp.k(),
        });
    }
    Ok(())
}

fn train_bilstm_cmd(g: &Global, cfg: &PipelineConfig, data: &Data) -> Result<()> {
    let out = g.out.clone().unwrap_or_else(|| g.models.clone());
    let kp = KeyPoseSet::load(&g.models.join("keyposes.bin"))?;
    let cvae = CvaeModel::load(&g.models.join("cvae.bin"))?;
    let seqs = load_data(&data.data, cfg)?;
    let latents = latent_sequences(&seqs, &kp, &cvae)?;
    let (windows, skipped) = make_training_windows(&latents);
    for e in &skipped {
        log::warn!("skipped: {e}");
    }
    let mut bcfg = cfg.bilstm.clone();
    bcfg.d_z = cvae.d_z();
    let (model, log) = train_bilstm(&windows, &bcfg)?;
    mkdir(&out)?;
    model.save(&out.join("bilstm.bin"))?;
    log.save(&out.join("bilstm_loss.csv"))?;
    cfg.save(&out.join("config_bilstm.txt"))?;
    println!(
        "bilstm trained on {} windows ({} sequences skipped)",
        windows.len(),
        skipped.len()
    );
    Ok(())
}

fn train_geinet_cmd(g: &Global, cfg: &PipelineConfig, data: &Data) -> Result<()> {
    let out = g.out.clone().unwrap_or_else(|| g.models.clone());
    let seqs = load_data(&data.data, cfg)?;
    let geis = gallery_geis(&seqs)?;
    let (model, log) = train_geinet(&geis, &cfg.geinet)?;
    mkdir(&out)?;
    model.save(&out.join("geinet.bin"))?;
    log.save(&out.join("geinet_loss.csv"))?;
    cfg.save(&out.join("config_geinet.txt"))?;
    let gei_dir = out.join("gallery_gei");
    mkdir(&gei_dir)?;
    for gei in &geis {
        gei.save_png(&gei_dir.join(format!("{}.png", gei.source_sequence_id)))?;
    }
    println!("geinet trained on {} GEIs, {} classes", geis.len(), model.labels().len());
    Ok(())
}

fn label(g: &Global, cfg: &PipelineConfig, data: &Data) -> Result<()> {
    let out = require_out(g)?;
    let kp = KeyPoseSet::load(&g.models.join("keyposes.bin"))?;
    let seqs = load_data(&data.data, cfg)?;
    let assignments = par_map(&seqs, g.jobs, |s| {
        assign_poses(s, &kp).map_err(|e| e.in_sequence(s.id()))
    })?;
    mkdir(&out)?;
    for (s, pa) in seqs.iter().zip(&assignments) {
        pa.save(&out.join(format!("{}.states.txt", s.id())))?;
    }
    let occluded: usize = assignments.iter().map(|pa| pa.occluded_indices().len()).sum();
    println!("labelled {} sequences, {occluded} frames occluded", seqs.len());
    Ok(())
}

fn occlude(g: &Global, cfg: &PipelineConfig, data: &Data, degree: f64) -> Result<()> {
    let out = require_out(g)?;
    let seqs = load_data(&data.data, cfg)?;
    let mut occluded = Vec::with_capacity(seqs.len());
    mkdir(&out)?;
    for (i, s) in seqs.iter().enumerate() {
        let mask = sample_mask(s.len(), degree, cfg.seed.wrapping_add(i as u64))?;
        let occ = occlude_sequence_with_mask(s, &mask)?;
        save_sequence(&occ, &out.join(s.id()))?;
        mask.save(&out.join(s.id()).join("mask.txt"))?;
        occluded.push(occ);
    }
    let entries: Vec<ManifestEntry> = occluded.iter().map(|s| entry(s, s.id())).collect();
    write_manifest(&out.join(MANIFEST), &entries)?;
    println!("occluded {} sequences at degree {degree}", seqs.len());
    Ok(())
}

fn load_ground_truth(path: Option<&PathBuf>, cfg: &PipelineConfig, n: usize) -> Result<Option<Vec<GaitSequence>>> {
    let Some(p) = path else { return Ok(None) };
    let gt = load_data(p, cfg)?;
    if gt.len() != n {
        return Err(Error::LengthMismatch {
            expected: n,
            actual: gt.len(),
        });
    }
    Ok(Some(gt))
}

fn reconstruct(g: &Global, cfg: &PipelineConfig, data: &Data, ground_truth: Option<&PathBuf>) -> Result<()> {
    let out = require_out(g)?;
    let kp = KeyPoseSet::load(&g.models.join("keyposes.bin"))?;
    let cvae = CvaeModel::load(&g.models.join("cvae.bin"))?;
    let bilstm = BilstmModel::load(&g.models.join("bilstm.bin"))?;
    let seqs = load_data(&data.data, cfg)?;
    let gt = load_ground_truth(ground_truth, cfg, seqs.len())?;
    let recs = par_map(&seqs, g.jobs, |s| {
        let run = || {
            let pa = assign_poses(s, &kp)?;
            reconstruct_sequence(s, &pa, &cvae, &bilstm)
        };
        run().map_err(|e| e.in_sequence(s.id()))
    })?;
    mkdir(&out)?;
    let mut entries = Vec::with_capacity(recs.len());
    for (i, r) in recs.iter().enumerate() {
        let dir = out.join(r.sequence.id());
        save_sequence(&r.sequence, &dir)?;
        let report = r.report(gt.as_ref().map(|g| &g[i]))?;
        write_text(&dir.join("reconstruction.csv"), &report)?;
        entries.push(entry(&r.sequence, r.sequence.id()));
    }
    write_manifest(&out.join(MANIFEST), &entries)?;
    let rebuilt: usize = recs.iter().map(|r| r.was_occluded.iter().filter(|o| **o).count()).sum();
    println!("reconstructed {rebuilt} frames in {} sequences", recs.len());
    Ok(())
}

fn evaluate(g: &Global, cfg: &PipelineConfig, data: &Data, ground_truth: Option<&PathBuf>) -> Result<()> {
    let out = require_out(g)?;
    let pipeline = TrainedPipeline::load(&g.models)?;
    let seqs = load_data(&data.data, cfg)?;
    let gt = load_ground_truth(ground_truth, cfg, seqs.len())?;
    let records = pipeline.evaluate(&seqs, gt.as_deref(), g.jobs)?;
    let curve = cmc_curve(&records, cfg.eval.max_rank.min(pipeline.geinet.labels().len()))?;
    mkdir(&out)?;
    write_text(&out.join("predictions.csv"), &predictions_csv(&records))?;
    write_text(&out.join("cmc.csv"), &cmc_csv(&curve))?;
    plot_cmc(&curve, &out.join("cmc.png"))?;
    let dice: Vec<f64> = records.iter().filter_map(|r| r.reconstruction_dice).collect();
    let mean_dice = if dice.is_empty() {
        String::new()
    } else {
        format!("{:.6}", dice.iter().sum::<f64>() / dice.len() as f64)
    };
    let rank1 = rank1_accuracy(&records)?;
    write_text(
        &out.join("summary.csv"),
        &format!("probes,rank1_accuracy,mean_reconstruction_dice\n{},{rank1:.4},{mean_dice}\n", records.len()),
    )?;
    println!("rank-1 accuracy {rank1:.2}% over {} probes", records.len());
    Ok(())
}

fn sweep(g: &Global, cfg: &PipelineConfig, data: &Data) -> Result<()> {
    let out = require_out(g)?;
    let pipeline = TrainedPipeline::load(&g.models)?;
    let probes = load_data(&data.data, cfg)?;
    let plan = SweepPlan {
        draws: cfg.eval.sweep_draws,
        seed: cfg.seed,
        jobs: g.jobs,
        ..SweepPlan::default()
    };
    let (report, clean, occluded) = occlusion_sweep(&pipeline, &probes, &plan)?;
    mkdir(&out)?;
    write_text(&out.join("sweep.csv"), &report.to_csv())?;
    write_text(&out.join("predictions_clean.csv"), &predictions_csv(&clean))?;
    let mut degrees = String::from("sequence_id,occlusion_degree,correct_rank1,reconstruction_dice\n");
    for r in &occluded {
        let dice = r.reconstruction_dice.map(|d| format!("{d:.6}")).unwrap_or_default();
        degrees.push_str(&format!(
            "{},{:.6},{},{dice}\n",
            r.sequence_id,
            r.occlusion_degree,
            u8::from(r.correct_at(1))
        ));
    }
    write_text(&out.join("sweep_records.csv"), &degrees)?;
    plot_sweep(&report, &out.join("sweep.png"))?;
    print!("{}", report.to_csv());
    Ok(())
}

fn kfold(g: &Global, cfg: &PipelineConfig, data: &Data, k: Option<&Vec<usize>>) -> Result<()> {
    let out = require_out(g)?;
    let seqs = load_data(&data.data, cfg)?;
    let labels: Vec<String> = seqs
        .iter()
        .map(|s| {
            s.subject()
                .map(str::to_string)
                .ok_or_else(|| Error::InvalidArgument(format!("sequence {} has no subject label", s.id())))
        })
        .collect::<Result<_>>()?;
    let k_values = k.cloned().unwrap_or_else(|| cfg.eval.kfold_values.clone());
    let results = kfold_robustness(&labels, &k_values, cfg.seed, |train, test| {
        let train_seqs: Vec<GaitSequence> = train.iter().map(|&i| seqs[i].clone()).collect();
        let test_seqs: Vec<GaitSequence> = test.iter().map(|&i| seqs[i].clone()).collect();
        let (pipeline, _) = TrainedPipeline::train(&train_seqs, &train_seqs, cfg)?;
        let records = pipeline.evaluate(&test_seqs, None, g.jobs)?;
        rank1_accuracy(&records)
    })?;
    mkdir(&out)?;
    write_text(&out.join("kfold.csv"), &kfold_csv(&results))?;
    plot_kfold(&results, &out.join("kfold.png"))?;
    for r in &results {
        println!(
            "k={} train {:.2}% median {:.2}% [{:.2}, {:.2}]",
            r.k,
            100.0 * r.train_fraction,
            r.quartiles.median,
            r.quartiles.min,
            r.quartiles.max
        );
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    let g = &cli.global;
    if g.jobs == 0 {
        return Err(Error::InvalidArgument("--jobs must be at least 1".into()));
    }
    let cfg = load_config(g)?;
    match &cli.command {
        Command::SynthData {
            subjects,
            seqs,
            frames,
            noise,
        } => synth_data(g, &cfg, *subjects, *seqs, *frames, *noise),
        Command::BuildKeyposes(d) => build_keyposes(g, &cfg, d),
        Command::TrainCvae(d) => train_cvae_cmd(g, &cfg, d),
        Command::TrainBilstm(d) => train_bilstm_cmd(g, &cfg, d),
        Command::TrainGeinet(d) => train_geinet_cmd(g, &cfg, d),
        Command::Label(d) => label(g, &cfg, d),
        Command::Occlude { data, degree } => occlude(g, &cfg, data, *degree),
        Command::Reconstruct { data, ground_truth } => reconstruct(g, &cfg, data, ground_truth.as_ref()),
        Command::Evaluate { data, ground_truth } => evaluate(g, &cfg, data, ground_truth.as_ref()),
        Command::Sweep(d) => sweep(g, &cfg, d),
        Command::Kfold { data, k } => kfold(g, &cfg, data, k.as_ref()),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error: {}: {msg}", e.module());
            ExitCode::from(1)
        }
    }
}
