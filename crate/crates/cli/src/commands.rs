//! Subcommand implementations. Each writes its artifacts under the run's
//! output directory.

use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use serde::Serialize;
use serde_json::json;

use sieve_core::grounding::discover;
use sieve_core::metrics::{
    ablate_random_embeddings, eval_csv, evaluate, evaluate_with_cache, k_csv, k_sweep, layer_csv, layer_sweep,
    snapshot_ihr,
};
use sieve_core::reward::score_trajectory;
use sieve_core::rollout::{prompt_text, run_rollout};
use sieve_core::synth_data::{generate_dataset, generate_samples, load_dataset, Sample};
use sieve_core::trainer::{metrics_csv, train, warm_start, StepMetrics};
use sieve_core::{write_atomic, EvidenceCache, Model, RngStream};

use crate::config::RunConfig;
use crate::visualize::{annotate, overlays, OverlaySidecar};

pub struct Run {
    pub cfg: RunConfig,
    pub out: PathBuf,
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    write_atomic(path, text.as_bytes()).with_context(|| format!("writing {}", path.display()))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_text(path, &text)
}

impl Run {
    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    pub fn echo_config(&self) -> Result<()> {
        write_text(&self.path("config.txt"), &self.cfg.to_text())
    }

    fn train_samples(&self) -> Result<Vec<Sample>> {
        match self.cfg.optional_path("data.dir") {
            Some(dir) => load_dataset(dir).with_context(|| format!("loading dataset {}", dir.display())),
            None => Ok(generate_samples(self.cfg.int("data.n"), self.cfg.seed())),
        }
    }

    /// Samples `data.n .. data.n + eval.n` of the seed's stream, disjoint
    /// from the generated training set.
    fn eval_samples(&self) -> Vec<Sample> {
        let n_train = self.cfg.int("data.n");
        let mut all = generate_samples(n_train + self.cfg.int("eval.n"), self.cfg.seed());
        all.split_off(n_train)
    }

    fn inspect_samples(&self) -> Result<Vec<Sample>> {
        let mut s = self.train_samples()?;
        s.truncate(self.cfg.int("inspect.n"));
        Ok(s)
    }

    fn model(&self) -> Result<Model> {
        match self.cfg.optional_path("model.path") {
            Some(p) => Model::load(p).with_context(|| format!("loading model {}", p.display())),
            None => Ok(Model::build(self.cfg.model()?)?),
        }
    }

    pub fn gen_data(&self) -> Result<()> {
        let entries = generate_dataset(self.cfg.int("data.n"), self.cfg.seed(), &self.out)?;
        log::info!("wrote {} samples to {}", entries.len(), self.out.display());
        Ok(())
    }

    pub fn discover(&self) -> Result<()> {
        let model = self.model()?;
        let params = self.cfg.discovery();
        let samples = self.inspect_samples()?;
        let mut lines = String::new();
        let mut cache = EvidenceCache::new();
        for s in &samples {
            let d = discover(&model, &s.image, &prompt_text(&s.question), &params)?;
            let anchors: Vec<_> = d
                .anchors
                .anchors
                .iter()
                .map(|a| json!({"token": a.token, "position": a.position, "score": a.score}))
                .collect();
            let snapshots = d
                .snapshots
                .iter()
                .map(|snap| {
                    let ihr = snapshot_ihr(s, snap, &model)?;
                    Ok(json!({
                        "anchor": snap.anchor_token,
                        "blocks": snap.region.blocks,
                        "matched_pixels": ihr.pred,
                        "bbox_patches": snap.region.bbox_patches,
                        "bbox_pixels": snap.region.bbox_pixels,
                        "n_vectors": snap.n_vectors(),
                        "ihr": ihr.hit,
                    }))
                })
                .collect::<sieve_core::Result<Vec<_>>>()?;
            let line = json!({
                "sample_id": s.sample_id,
                "question": s.question,
                "target_token": model.vocab().token(d.target_id),
                "anchors": anchors,
                "snapshots": snapshots,
            });
            lines.push_str(&line.to_string());
            lines.push('\n');
            cache.upsert(&s.sample_id, d.snapshots, model.version);
        }
        write_text(&self.path("discoveries.jsonl"), &lines)?;
        cache.save(&self.path("cache.svec"))?;
        Ok(())
    }

    pub fn rollout(&self) -> Result<()> {
        let model = self.model()?;
        let samples = self.inspect_samples()?;
        let cache = EvidenceCache::populate(&samples, &model, &self.cfg.discovery())?;
        let params = self.cfg.rollout();
        let root = RngStream::new(self.cfg.seed()).split("rollout");
        let mut jsonl = String::new();
        let mut csv = String::from("sample_id,r_res,r_format,r_emb,r_act,total\n");
        for (i, s) in samples.iter().enumerate() {
            let traj = run_rollout(&model, s, &cache, &params, &mut root.split_index("sample", i as u64))?;
            let r = score_trajectory(&traj, model.vocab(), &s.gold_answer, &self.cfg.weights(), &self.cfg.act());
            jsonl.push_str(&traj.to_jsonl(model.vocab()));
            csv.push_str(&format!("{},{},{},{},{},{}\n", s.sample_id, r.r_res, r.r_format, r.r_emb, r.r_act, r.total));
        }
        write_text(&self.path("trajectories.jsonl"), &jsonl)?;
        write_text(&self.path("rewards.csv"), &csv)?;
        Ok(())
    }

    pub fn train(&self) -> Result<()> {
        let samples = self.train_samples()?;
        let mut model = self.model()?;
        let discovery = self.cfg.discovery();
        let ws = self.cfg.warm_start();
        let clock = Instant::now();
        if ws.steps > 0 {
            let report = warm_start(&mut model, &samples, &ws, &discovery, |step, ce, al| {
                log::info!("warm start {step}: ce {ce:.4} align {al:.4}");
            })?;
            let mut csv = String::from("step,cross_entropy,alignment\n");
            for (i, (ce, al)) in report.losses.iter().enumerate() {
                csv.push_str(&format!("{i},{ce},{al}\n"));
            }
            write_text(&self.path("warm_start.csv"), &csv)?;
            model.save(&self.path("warm_start_model.bin"))?;
            log::info!("warm start finished in {:.1}s", clock.elapsed().as_secs_f64());
        }
        let config = self.cfg.train();
        let mut cache = EvidenceCache::populate(&samples, &model, &discovery)?;
        let report = train(&mut model, &samples, &mut cache, &config, None, |_| {})?;
        log::info!("training finished in {:.1}s", clock.elapsed().as_secs_f64());

        write_text(&self.path("metrics.csv"), &metrics_csv(&report.metrics))?;
        let steps: String =
            report.metrics.iter().map(|m| serde_json::to_string(m).expect("metrics serialize") + "\n").collect();
        write_text(&self.path("steps.jsonl"), &steps)?;
        let mut refreshed = String::from("step,sample_id\n");
        for (step, id) in &report.refreshed {
            refreshed.push_str(&format!("{step},{id}\n"));
        }
        write_text(&self.path("refreshes.csv"), &refreshed)?;
        write_json(&self.path("summary.json"), &train_summary(&report.metrics, report.halted.as_deref()))?;
        model.save(&self.path("model.bin"))?;
        cache.save(&self.path("cache.svec"))?;
        Ok(())
    }

    pub fn eval(&self) -> Result<()> {
        let model = self.model()?;
        let samples = self.eval_samples();
        let report = evaluate(&model, &samples, &self.cfg.eval())?;
        write_text(&self.path("eval.csv"), &eval_csv(&report))?;
        write_json(
            &self.path("eval_summary.json"),
            &json!({"n": samples.len(), "accuracy": report.accuracy, "insertion_rate": report.insertion_rate}),
        )
    }

    pub fn sweep_layers(&self) -> Result<()> {
        let model = self.model()?;
        let samples = self.eval_samples();
        let choices = self.cfg.sweep_layers(model.config.n_layers);
        let rows = layer_sweep(&model, &samples, &choices, &self.cfg.discovery())?;
        write_text(&self.path("layers.csv"), &layer_csv(&rows))?;
        write_json(&self.path("layers.json"), &json!({"n": samples.len(), "k": 1, "rows": rows}))
    }

    pub fn sweep_k(&self) -> Result<()> {
        let model = self.model()?;
        let samples = self.eval_samples();
        let rows = k_sweep(&model, &samples, &self.cfg.list("sweep.k"), &self.cfg.eval())?;
        for r in rows.iter().filter(|r| r.clamped) {
            log::warn!("k = {} exceeds the block count; clamped to {}", r.k, r.effective_k);
        }
        write_text(&self.path("k.csv"), &k_csv(&rows))?;
        write_json(&self.path("k.json"), &json!({"n": samples.len(), "rows": rows}))
    }

    pub fn ablate_random(&self) -> Result<()> {
        let model = self.model()?;
        let samples = self.eval_samples();
        let base = self.cfg.eval();
        let discovered = EvidenceCache::populate(&samples, &model, &base.discovery)?;
        let mut csv = String::from("seed,discovered_accuracy,random_accuracy,discovered_insertion_rate,random_insertion_rate\n");
        let mut rows = Vec::new();
        for i in 0..self.cfg.u64("eval.seeds") {
            let params = sieve_core::metrics::EvalParams { seed: base.seed + i, ..base.clone() };
            let d = evaluate_with_cache(&model, &samples, &discovered, &params.rollout, params.seed)?;
            let r = ablate_random_embeddings(&model, &samples, &discovered, &params)?;
            csv.push_str(&format!(
                "{},{:.6},{:.6},{:.6},{:.6}\n",
                params.seed, d.accuracy, r.accuracy, d.insertion_rate, r.insertion_rate
            ));
            rows.push(json!({
                "seed": params.seed,
                "discovered_accuracy": d.accuracy,
                "random_accuracy": r.accuracy,
                "discovered_at_least_random": d.accuracy >= r.accuracy,
            }));
        }
        write_text(&self.path("ablation.csv"), &csv)?;
        write_json(&self.path("ablation.json"), &json!({"n": samples.len(), "seeds": rows}))
    }

    pub fn visualize(&self) -> Result<()> {
        let model = self.model()?;
        let params = self.cfg.discovery();
        let grid = (model.config.grid_side(), model.config.grid_side());
        let dir = self.path("vis");
        for s in self.inspect_samples()? {
            let d = discover(&model, &s.image, &prompt_text(&s.question), &params)?;
            let boxes = overlays(&d.snapshots, grid, model.config.patch_size);
            let image = annotate(&s.image, &boxes)?;
            write_atomic(&dir.join(format!("{}.ppm", s.sample_id)), &image.to_ppm())?;
            write_json(
                &dir.join(format!("{}.json", s.sample_id)),
                &OverlaySidecar { sample_id: s.sample_id.clone(), boxes },
            )?;
        }
        Ok(())
    }

    pub fn cache_dump(&self, path: &Path) -> Result<String> {
        let cache = EvidenceCache::load(path)?;
        let mut out = String::new();
        for e in cache.entries() {
            let snaps: Vec<_> = e
                .snapshots
                .iter()
                .map(|s| {
                    json!({
                        "anchor_id": s.anchor_id,
                        "anchor": s.anchor_token,
                        "bbox_patches": s.region.bbox_patches,
                        "bbox_pixels": s.region.bbox_pixels,
                        "n_vectors": s.n_vectors(),
                        "d": s.d,
                        "source_space": s.source_space,
                        "l2": s.embeddings.iter().map(|x| x * x).sum::<f64>().sqrt(),
                    })
                })
                .collect();
            let line = json!({
                "sample_id": e.sample_id,
                "model_version": e.model_version,
                "refresh_count": e.refresh_count,
                "snapshots": snaps,
            });
            out.push_str(&line.to_string());
            out.push('\n');
        }
        Ok(out)
    }
}

/// Reward trend numbers for a finished run. `collapse` marks a final
/// 10-step mean below half of the best step.
pub fn train_summary(metrics: &[StepMetrics], halted: Option<&str>) -> serde_json::Value {
    let rewards: Vec<f64> = metrics.iter().map(|m| m.mean_reward).collect();
    let window = rewards.len().min(10);
    let mean = |xs: &[f64]| if xs.is_empty() { 0.0 } else { xs.iter().sum::<f64>() / xs.len() as f64 };
    let first = mean(&rewards[..window]);
    let last = mean(&rewards[rewards.len() - window..]);
    let peak = rewards.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    json!({
        "steps": rewards.len(),
        "first10_mean_reward": first,
        "last10_mean_reward": last,
        "gain": last - first,
        "peak_reward": if rewards.is_empty() { 0.0 } else { peak },
        "collapse": !rewards.is_empty() && last < 0.5 * peak,
        "halted": halted,
    })
}
