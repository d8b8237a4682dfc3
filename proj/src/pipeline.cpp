#include "brain3d/pipeline.hpp"

#include <fcntl.h>
#include <sys/file.h>
#include <unistd.h>

#include <fstream>
#include <random>
#include <sstream>

namespace brain3d {

namespace fs = std::filesystem;

namespace {

std::uint64_t subject_seed(std::uint64_t base, const std::string& subject_id) {
  std::uint64_t h = 0xCBF29CE484222325ull;
  for (unsigned char c : subject_id) h = (h ^ c) * 0x100000001B3ull;
  std::seed_seq seq{static_cast<std::uint32_t>(base), static_cast<std::uint32_t>(base >> 32),
                    static_cast<std::uint32_t>(h), static_cast<std::uint32_t>(h >> 32)};
  std::mt19937_64 rng(seq);
  return rng();
}

std::string jsonl(const std::vector<nlohmann::json>& records) {
  std::string out;
  for (const auto& r : records) out += r.dump() + "\n";
  return out;
}

std::string stage_name(Phase phase) { return to_string(phase); }

Checkpoint load_stage(const fs::path& dir, const std::string& expected_stage) {
  if (!fs::exists(dir / "manifest.json")) {
    throw ProvenanceError("missing checkpoint for stage '" + expected_stage + "' at " + dir.string());
  }
  Checkpoint ckpt = load_checkpoint(dir);
  if (ckpt.stage() != expected_stage) {
    throw ProvenanceError("checkpoint " + dir.string() + " is at stage '" + ckpt.stage() + "', expected '" +
                          expected_stage + "'");
  }
  return ckpt;
}

fs::path default_checkpoint(const fs::path& out) {
  const fs::path dir = checkpoint_dir(out, "2b");
  if (!fs::exists(dir / "manifest.json")) throw UsageError("missing checkpoint: " + dir.string());
  return dir;
}

}  // namespace

ExperimentLock::ExperimentLock(const fs::path& dir) : path_(dir / ".lock") {
  fs::create_directories(dir);
  fd_ = ::open(path_.c_str(), O_CREAT | O_RDWR, 0644);
  if (fd_ < 0) throw Error("cannot open lock file " + path_.string());
  if (::flock(fd_, LOCK_EX | LOCK_NB) != 0) {
    ::close(fd_);
    fd_ = -1;
    throw UsageError("experiment directory is locked by another process: " + dir.string());
  }
}

ExperimentLock::~ExperimentLock() {
  if (fd_ >= 0) {
    ::flock(fd_, LOCK_UN);
    ::close(fd_);
  }
}

void write_file_atomic(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    out << text;
    if (!out) throw Error("cannot write " + tmp.string());
  }
  fs::rename(tmp, path);
}

std::vector<nlohmann::json> read_jsonl(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw UsageError("cannot open " + path.string());
  std::vector<nlohmann::json> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    try {
      out.push_back(nlohmann::json::parse(line));
    } catch (const nlohmann::json::exception& e) {
      throw UsageError("malformed JSON line in " + path.string() + ": " + e.what());
    }
  }
  return out;
}

const std::string& CohortEntry::subject_id() const { return record.at("subject_id").get_ref<const std::string&>(); }
const std::string& CohortEntry::report() const { return record.at("report").get_ref<const std::string&>(); }

const CohortEntry& CohortIndex::find(const std::string& subject_id) const {
  for (const auto& e : entries) {
    if (e.subject_id() == subject_id) return e;
  }
  throw UsageError("unknown subject id: " + subject_id);
}

std::vector<const CohortEntry*> CohortIndex::subset(const std::string& split_name) const {
  const std::vector<std::string>* ids = nullptr;
  if (split_name == "train") ids = &split.train;
  if (split_name == "val") ids = &split.val;
  if (split_name == "test") ids = &split.test;
  std::vector<const CohortEntry*> out;
  if (split_name == "all") {
    for (const auto& e : entries) out.push_back(&e);
    return out;
  }
  if (!ids) throw UsageError("unknown split: " + split_name);
  for (const auto& id : *ids) out.push_back(&find(id));
  return out;
}

CohortIndex load_cohort(const fs::path& experiment_dir) {
  CohortIndex idx;
  idx.root = experiment_dir / "cohort";
  if (!fs::exists(idx.root / "manifest.jsonl")) {
    throw UsageError("no cohort under " + experiment_dir.string() + " (run synth first)");
  }
  for (auto& rec : read_jsonl(idx.root / "manifest.jsonl")) {
    CohortEntry e;
    e.volume_path = idx.root / rec.at("volume").get<std::string>();
    e.record = std::move(rec);
    idx.entries.push_back(std::move(e));
  }
  std::ifstream in(idx.root / "splits.json");
  idx.split = split_from_json(nlohmann::json::parse(in));
  return idx;
}

Volume load_model_volume(const CohortEntry& entry, const ExperimentConfig& cfg) {
  const PreprocessConfig pc{cfg.data.clip_low_percentile, cfg.data.clip_high_percentile,
                            cfg.model.encoder.volume_dims};
  return preprocess_volume(read_volume(entry.volume_path), pc);
}

std::vector<TrainingExample> training_examples(const CohortIndex& cohort, const std::string& split_name,
                                               const Vocabulary& vocab, const ExperimentConfig& cfg) {
  std::vector<TrainingExample> out;
  for (const CohortEntry* e : cohort.subset(split_name)) {
    out.push_back({e->subject_id(), load_model_volume(*e, cfg), report_ids(vocab, e->report())});
  }
  return out;
}

Checkpoint build_base_model(const CohortIndex& cohort, const ExperimentConfig& cfg) {
  std::vector<std::string> corpus{std::string(kCanonicalPrompt)};
  for (const CohortEntry* e : cohort.subset("train")) corpus.push_back(e->report());
  const Vocabulary vocab = Vocabulary::build(corpus);
  Checkpoint ckpt{init_model<float>(cfg.model, vocab, cfg.seed_for("init")), {"base"}, {}};
  std::vector<std::vector<int>> reports;
  for (const CohortEntry* e : cohort.subset("train")) reports.push_back(report_ids(vocab, e->report()));
  const auto losses = pretrain_language_model(ckpt.model, reports, cfg.lm_pretrain);
  ckpt.extra = {{"experiment_config", experiment_config_to_json(cfg)},
                {"lm_pretrain_final_loss", losses.empty() ? 0.0 : losses.back()}};
  return ckpt;
}

fs::path checkpoint_dir(const fs::path& experiment_dir, const std::string& stage) {
  return experiment_dir / "checkpoints" / (stage == "base" ? std::string("base") : "phase" + stage);
}

std::string required_parent(Phase phase) {
  switch (phase) {
    case Phase::k1: return "base";
    case Phase::k2a: return "1";
    case Phase::k2b: return "2a";
  }
  return {};
}

fs::path cmd_synth(const ExperimentConfig& cfg, const fs::path& out) {
  cfg.validate();
  ExperimentLock lock(out);
  const auto cohort = build_cohort(cfg.data.cohort);
  const auto split = split_cohort(cohort, cfg.data.splits, cfg.seed_for("split"));
  const fs::path final_dir = out / "cohort";
  const fs::path tmp = out / "cohort.tmp";
  fs::remove_all(tmp);
  fs::create_directories(tmp / "volumes");
  std::vector<nlohmann::json> records;
  for (const auto& rec : cohort) {
    const std::string rel = "volumes/" + rec.subject_id + ".bvol";
    write_volume(rec.volume, tmp / rel);
    records.push_back(manifest_record(rec, rel));
  }
  write_file_atomic(tmp / "manifest.jsonl", jsonl(records));
  write_file_atomic(tmp / "splits.json", split_to_json(split).dump(2) + "\n");
  write_file_atomic(tmp / "config.json", experiment_config_to_json(cfg).dump(2) + "\n");
  fs::remove_all(final_dir);
  fs::rename(tmp, final_dir);
  return final_dir;
}

fs::path cmd_train(const ExperimentConfig& cfg, Phase phase, const fs::path& out,
                   const std::optional<fs::path>& init) {
  cfg.validate();
  ExperimentLock lock(out);
  const CohortIndex cohort = load_cohort(out);
  const std::string parent = required_parent(phase);

  Checkpoint ckpt;
  if (init) {
    ckpt = load_stage(*init, parent);
  } else if (phase == Phase::k1 && !fs::exists(checkpoint_dir(out, "base") / "manifest.json")) {
    ckpt = build_base_model(cohort, cfg);
    save_checkpoint(ckpt, checkpoint_dir(out, "base"));
  } else {
    ckpt = load_stage(checkpoint_dir(out, parent), parent);
  }

  Model<float>& model = ckpt.model;
  if (phase == Phase::k2b && !model.has_lora()) {
    std::mt19937_64 rng(cfg.seed_for("lora"));
    lora_inject(model.params, model.config.lm, model.config.lora, rng);
  }
  const auto train = training_examples(cohort, "train", model.vocab, cfg);
  const auto val = training_examples(cohort, "val", model.vocab, cfg);
  std::vector<nlohmann::json> log;
  const PhaseResult result = run_phase(model, train, val, cfg.train(phase),
                                       [&](const EpochMetrics& m) { log.push_back(epoch_metrics_to_json(m)); });

  ckpt.provenance.push_back(stage_name(phase));
  ckpt.extra = {{"experiment_config", experiment_config_to_json(cfg)},
                {"best_val_loss", result.best_val_loss},
                {"best_epoch", result.best_epoch},
                {"updates", result.updates},
                {"early_stopped", result.early_stopped}};
  write_file_atomic(out / "metrics" / ("phase" + stage_name(phase) + ".jsonl"), jsonl(log));
  const fs::path dir = checkpoint_dir(out, stage_name(phase));
  save_checkpoint(ckpt, dir);
  return dir;
}

fs::path cmd_generate(const ExperimentConfig& cfg, const fs::path& out, const std::string& split_name,
                      const std::optional<fs::path>& checkpoint) {
  cfg.validate();
  ExperimentLock lock(out);
  const CohortIndex cohort = load_cohort(out);
  const auto subjects = cohort.subset(split_name);
  const Checkpoint ckpt = load_checkpoint(checkpoint ? *checkpoint : default_checkpoint(out));
  const ReportGenerator generator(ckpt.model);
  std::vector<nlohmann::json> records;
  for (const CohortEntry* e : subjects) {
    DecodeConfig dc = cfg.decode;
    dc.seed = subject_seed(cfg.decode.seed, e->subject_id());
    const Generation g = generator.generate(load_model_volume(*e, cfg), dc);
    records.push_back({{"subject_id", e->subject_id()},
                       {"report", g.text},
                       {"seed", dc.seed},
                       {"config", decode_config_to_json(dc)}});
  }
  const fs::path path = out / "predictions" / (split_name + ".jsonl");
  write_file_atomic(path, jsonl(records));
  return path;
}

fs::path cmd_evaluate(const ExperimentConfig& cfg, const fs::path& out, const fs::path& predictions) {
  cfg.validate();
  ExperimentLock lock(out);
  const CohortIndex cohort = load_cohort(out);
  std::vector<std::string> pred, gold;
  for (const auto& rec : read_jsonl(predictions)) {
    pred.push_back(rec.at("report").get<std::string>());
    gold.push_back(cohort.find(rec.at("subject_id").get<std::string>()).report());
  }
  if (pred.empty()) throw UsageError("no predictions in " + predictions.string());
  nlohmann::json report = metric_report_to_json(evaluate_reports(pred, gold, cfg.eval));
  report["n_subjects"] = pred.size();
  report["predictions"] = predictions.filename().string();
  const fs::path path = out / "eval" / (predictions.stem().string() + ".json");
  write_file_atomic(path, report.dump(2) + "\n");
  return path;
}

fs::path cmd_explain(const ExperimentConfig& cfg, const fs::path& out, const std::string& subject_id,
                     const std::optional<fs::path>& checkpoint) {
  cfg.validate();
  ExperimentLock lock(out);
  const CohortIndex cohort = load_cohort(out);
  const CohortEntry& entry = cohort.find(subject_id);
  const Checkpoint ckpt = load_checkpoint(checkpoint ? *checkpoint : default_checkpoint(out));
  const Volume volume = load_model_volume(entry, cfg);

  DecodeConfig dc = cfg.decode;
  dc.seed = subject_seed(cfg.decode.seed, subject_id);
  const std::string report = ReportGenerator(ckpt.model).generate(volume, dc).text;
  const Mask mask = brain_mask(volume, cfg.interpret.mask_threshold);
  const auto& sc = cfg.interpret.slic;
  const SupervoxelMap map = slic_supervoxels(volume, mask, sc.n_supervoxels, sc.compactness, sc.iterations);
  const AttributionMap attribution = lime_attribute(ckpt.model, volume, map, report, cfg.interpret.lime);

  nlohmann::json sidecar = attribution_sidecar(attribution, map, experiment_config_to_json(cfg)["interpret"]);
  sidecar["subject_id"] = subject_id;
  sidecar["report"] = report;
  sidecar["lime_seed"] = cfg.interpret.lime.seed;
  const fs::path dir = out / "explain";
  fs::create_directories(dir);
  const fs::path vol_tmp = dir / (subject_id + ".bvol.tmp");
  write_volume(attribution.voxel_weights, vol_tmp);
  fs::rename(vol_tmp, dir / (subject_id + ".bvol"));
  write_file_atomic(dir / (subject_id + ".json"), sidecar.dump(2) + "\n");
  return dir / (subject_id + ".bvol");
}

}  // namespace brain3d
