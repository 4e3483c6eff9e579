// zslab: command-line driver for feature extraction, training, encoding,
// decoding and evaluation.

#include "zslab/evaluation.hpp"
#include "zslab/synth.hpp"
#include "zslab/training.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <Eigen/Core>

#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <optional>
#include <unordered_map>

namespace fs = std::filesystem;
using namespace zslab;

namespace {

enum Exit { kOk = 0, kUsage = 1, kData = 2, kNumeric = 3 };

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

void require_file(const fs::path& p, const char* what) {
  if (!fs::is_regular_file(p)) throw UsageError(std::string(what) + " not found: " + p.string());
}

void require_dir(const fs::path& p, const char* what) {
  if (!fs::is_directory(p)) throw UsageError(std::string(what) + " is not a directory: " + p.string());
}

/// Creates `dir` (and parents) or fails if a non-directory is in the way.
void prepare_out_dir(const fs::path& dir) {
  if (fs::exists(dir) && !fs::is_directory(dir)) throw UsageError("output path exists and is not a directory: " + dir.string());
  fs::create_directories(dir);
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

FeatureSequence features_for(const ManifestEntry& e, FeatureKind kind) {
  Waveform w = read_wav(e.wav);
  FeatureSequence f = kind == FeatureKind::MFCC39 ? mfcc39(w) : fbank45(w);
  f.utterance_id = e.id;
  f.speaker_id = e.speaker;
  return f;
}

std::vector<fs::path> symbol_files(const fs::path& p) {
  std::vector<fs::path> out;
  if (fs::is_directory(p)) {
    for (const auto& entry : fs::directory_iterator(p))
      if (entry.path().extension() == ".sym") out.push_back(entry.path());
    std::sort(out.begin(), out.end());
    if (out.empty()) throw UsageError("no .sym files in " + p.string());
  } else {
    require_file(p, "symbol file");
    out.push_back(p);
  }
  return out;
}

// ---------------------------------------------------------------------------

struct SynthArgs {
  fs::path out;
  SynthOptions opts;
};

int cmd_synth(const SynthArgs& a) {
  prepare_out_dir(a.out);
  const SynthCorpus c = write_synthetic_corpus(a.out, a.opts);
  std::cout << "wrote " << c.train.size() << " train and " << c.test.size() << " test utterances to " << a.out.string()
            << '\n';
  return kOk;
}

struct FeaturesArgs {
  fs::path manifest, out;
  std::string kind = "mfcc39";
  bool force = false;
};

int cmd_features(const FeaturesArgs& a) {
  require_file(a.manifest, "manifest");
  const FeatureKind kind = parse_feature_kind(a.kind);
  const auto entries = read_manifest(a.manifest);
  for (const auto& e : entries) require_file(e.wav, "wav");
  prepare_out_dir(a.out);

  int failed = 0, written = 0, skipped = 0;
  for (const auto& e : entries) {
    const fs::path target = a.out / (e.id + ".zsfeat");
    if (!a.force && fs::exists(target)) {
      ++skipped;
      continue;
    }
    try {
      write_features(target, features_for(e, kind));
      ++written;
    } catch (const std::exception& ex) {
      std::cerr << "error: " << e.id << ": " << ex.what() << '\n';
      ++failed;
    }
  }
  std::cout << written << " written, " << skipped << " skipped, " << failed << " failed\n";
  return failed ? kData : kOk;
}

struct TrainArgs {
  fs::path manifest, out, config, resume;
  std::map<std::string, std::string> overrides;  // json key -> raw value
  bool no_speaker_conditioning = false;
  bool paper_literal_loss = false;
  bool quiet = false;
  std::int64_t log_every = 100;
};

CodecConfig resolve_config(const TrainArgs& a) {
  nlohmann::json j = nlohmann::json::object();
  if (!a.config.empty()) {
    require_file(a.config, "config");
    std::ifstream in(a.config);
    try {
      j = nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(a.config.string() + ": " + e.what());
    }
    if (!j.is_object()) throw FormatError(a.config.string() + ": config must be a JSON object");
  }
  for (const auto& [key, raw] : a.overrides) {
    if (key == "bottleneck") {
      j[key] = raw;
      continue;
    }
    try {
      j[key] = nlohmann::json::parse(raw);
    } catch (const nlohmann::json::exception&) {
      throw UsageError("bad value for " + key + ": " + raw);
    }
  }
  if (a.no_speaker_conditioning) j["speaker_conditioning"] = false;
  if (a.paper_literal_loss) j["paper_literal_loss"] = true;
  CodecConfig c;
  try {
    from_json(j, c);
  } catch (const nlohmann::json::exception& e) {
    throw UsageError(std::string("config: ") + e.what());
  }
  try {
    c.validate();
  } catch (const std::invalid_argument& e) {
    throw UsageError(std::string("config: ") + e.what());
  }
  return c;
}

int cmd_train(const TrainArgs& a) {
  require_file(a.manifest, "manifest");
  if (!a.resume.empty()) require_file(a.resume, "checkpoint");
  const auto entries = read_manifest(a.manifest);
  for (const auto& e : entries) require_file(e.wav, "wav");

  std::optional<Trainer> trainer;
  if (!a.resume.empty()) {
    trainer.emplace(load_checkpoint(a.resume));
    // Only the schedule may change on resume.
    for (const auto& [key, raw] : a.overrides) {
      if (key == "total_steps")
        trainer->model().mutable_config().training.total_steps = std::stoll(raw);
      else if (key == "checkpoint_every")
        trainer->model().mutable_config().training.checkpoint_every = std::stoll(raw);
      else
        throw UsageError("--" + key + " cannot be changed when resuming");
    }
  }
  const CodecConfig config = trainer ? trainer->model().config() : resolve_config(a);
  const TrainingCorpus corpus = load_corpus(entries);
  prepare_out_dir(a.out);
  write_text(a.out / "config.json", nlohmann::json(config).dump(2) + "\n");

  if (!trainer) trainer.emplace(make_model(config, corpus));
  RunOptions opts;
  opts.checkpoint_dir = a.out;
  opts.checkpoint_every = config.training.checkpoint_every;
  std::ofstream log(a.out / "loss.tsv", a.resume.empty() ? std::ios::trunc : std::ios::app);
  if (a.resume.empty()) log << "step\trecon\taux\ttotal\n";
  opts.on_step = [&](std::int64_t step, const LossReport& r) {
    log << step << '\t' << std::setprecision(9) << r.recon << '\t' << r.aux << '\t' << r.total << '\n';
    if (!a.quiet && a.log_every > 0 && step % a.log_every == 0)
      std::cout << "step " << step << " recon " << r.recon << " aux " << r.aux << " total " << r.total << '\n';
  };
  const TrainingRun run = run_training(*trainer, corpus, opts);
  if (!run.checkpoints.empty()) std::cout << "final checkpoint " << run.checkpoints.back().string() << '\n';
  return kOk;
}

struct EncodeArgs {
  fs::path checkpoint, manifest, out;
};

int cmd_encode(const EncodeArgs& a) {
  require_file(a.checkpoint, "checkpoint");
  require_file(a.manifest, "manifest");
  const auto entries = read_manifest(a.manifest);
  for (const auto& e : entries) require_file(e.wav, "wav");
  Trainer t = load_checkpoint(a.checkpoint);
  prepare_out_dir(a.out);
  for (const auto& e : entries) {
    auto r = encode(t.model(), features_for(e, FeatureKind::MFCC39));
    write_symbol_file(a.out / (e.id + ".sym"), r.symbols);
  }
  std::cout << "encoded " << entries.size() << " utterances\n";
  return kOk;
}

struct DecodeArgs {
  fs::path checkpoint, symbols, out;
  std::string speaker;
};

int cmd_decode(const DecodeArgs& a) {
  require_file(a.checkpoint, "checkpoint");
  const auto files = symbol_files(a.symbols);
  Trainer t = load_checkpoint(a.checkpoint);
  auto& model = t.model();
  std::string speaker = a.speaker;
  if (model.speaker_conditioned()) {
    if (speaker.empty()) throw UsageError("--speaker is required for a speaker-conditioned model");
    model.speaker_index(speaker);  // validates
  }
  std::vector<SymbolSequence> seqs;
  for (const auto& f : files) seqs.push_back(read_symbol_file(f));
  prepare_out_dir(a.out);
  for (const auto& s : seqs) {
    FeatureSequence y = decode(model, model.symbols_to_latent(s.symbol_ids), speaker);
    y.frame_shift = s.frame_shift;
    write_features(a.out / (s.utterance_id + ".zsfeat"), y);
  }
  std::cout << "decoded " << seqs.size() << " utterances\n";
  return kOk;
}

struct AbxTaskArgs {
  fs::path alignments, out;
  AbxTaskOptions opts;
};

int cmd_abx_task(const AbxTaskArgs& a) {
  require_file(a.alignments, "alignments");
  const AbxTask task = make_abx_task(read_alignments(a.alignments), a.opts);
  if (task.triples.empty()) throw FormatError("alignments yield no minimal-pair triples");
  write_abx_task(a.out, task);
  std::cout << task.triples.size() << " triples\n";
  return kOk;
}

struct AbxArgs {
  fs::path task, features, checkpoint, manifest;
  std::string rep = "latent";
  std::string speaker;
};

int cmd_abx(const AbxArgs& a) {
  require_file(a.task, "task");
  const AbxTask task = read_abx_task(a.task);
  std::unordered_map<std::string, Eigen::MatrixXd> reps;

  if (!a.features.empty()) {
    if (!a.checkpoint.empty()) throw UsageError("--features and --checkpoint are exclusive");
    require_dir(a.features, "features");
    for (const auto& t : task.triples)
      for (const SegmentRef* s : {&t.a, &t.b, &t.x})
        if (!reps.count(s->utt))
          reps[s->utt] = read_features(a.features / (s->utt + ".zsfeat")).frames.cast<double>();
  } else {
    if (a.checkpoint.empty() || a.manifest.empty())
      throw UsageError("need --features, or --checkpoint with --manifest");
    if (a.rep != "latent" && a.rep != "output") throw UsageError("--rep must be latent or output");
    require_file(a.checkpoint, "checkpoint");
    require_file(a.manifest, "manifest");
    Trainer t = load_checkpoint(a.checkpoint);
    auto& model = t.model();
    std::string speaker = a.speaker;
    if (model.speaker_conditioned() && speaker.empty()) speaker = model.speakers().front();
    for (const auto& e : read_manifest(a.manifest)) {
      auto r = encode(model, features_for(e, FeatureKind::MFCC39));
      reps[e.id] = a.rep == "latent" ? latent_representation(model, r.symbols)
                                     : Eigen::MatrixXd(decode(model, r.z, speaker).frames.cast<double>());
    }
  }
  const AbxResult r = abx_error_rate(task, [&reps](const std::string& utt) -> const Eigen::MatrixXd& {
    auto it = reps.find(utt);
    if (it == reps.end()) throw FormatError("no representation for utterance '" + utt + "'");
    return it->second;
  });
  std::cout << std::fixed << std::setprecision(2) << "abx_error\t" << 100.0 * r.error_rate << "\ntriples\t"
            << r.num_triples << "\ncells\t" << r.num_cells << '\n';
  return kOk;
}

int cmd_bitrate(const fs::path& symbols) {
  std::vector<SymbolSequence> seqs;
  for (const auto& f : symbol_files(symbols)) seqs.push_back(read_symbol_file(f));
  const SymbolStream s = make_stream(seqs);
  if (s.symbols.empty() || !(s.duration > 0)) throw FormatError("symbol stream is empty or has zero duration");
  std::cout << std::setprecision(10) << bitrate(s) << '\n';
  return kOk;
}

struct ReportArgs {
  fs::path checkpoint, ablation, task, manifest, out;
  std::string speaker, name = "model";
};

int cmd_report(const ReportArgs& a) {
  require_file(a.checkpoint, "checkpoint");
  if (!a.ablation.empty()) require_file(a.ablation, "ablation checkpoint");
  require_file(a.task, "task");
  require_file(a.manifest, "manifest");
  const AbxTask task = read_abx_task(a.task);
  const auto test = read_manifest(a.manifest);
  Trainer main = load_checkpoint(a.checkpoint);
  std::optional<Trainer> ablation;
  if (!a.ablation.empty()) ablation.emplace(load_checkpoint(a.ablation));
  const ReportRow row = eval_report(main.model(), ablation ? &ablation->model() : nullptr, task, test,
                                    ReportOptions{a.speaker}, a.name);
  const std::string tsv = report_tsv({row});
  if (!a.out.empty()) write_text(a.out, tsv);
  std::cout << tsv;
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  if (const char* threads = std::getenv("ZSLAB_THREADS")) {
    const int n = std::atoi(threads);
    if (n > 0) Eigen::setNbThreads(n);
  }

  CLI::App app{"zslab: discrete acoustic unit discovery lab"};
  app.require_subcommand(1);

  SynthArgs synth;
  auto* s = app.add_subcommand("synth", "Write the synthetic two-speaker corpus");
  s->add_option("--out", synth.out, "Output directory")->required();
  s->add_option("--seed", synth.opts.seed, "Generator seed")->capture_default_str();
  s->add_option("--train-seconds", synth.opts.train_seconds, "Training audio, seconds")->capture_default_str();
  s->add_option("--test-seconds", synth.opts.test_seconds, "Test audio, seconds")->capture_default_str();
  s->add_option("--utterance-seconds", synth.opts.utterance_seconds, "Utterance length")->capture_default_str();

  FeaturesArgs feats;
  auto* f = app.add_subcommand("features", "Extract one ZSFEAT1 file per manifest utterance");
  f->add_option("--manifest", feats.manifest, "JSON Lines manifest")->required();
  f->add_option("--out", feats.out, "Output directory")->required();
  f->add_option("--kind", feats.kind, "mfcc39 or fbank45")->check(CLI::IsMember({"mfcc39", "fbank45"}))->capture_default_str();
  f->add_flag("--force", feats.force, "Overwrite existing files");

  TrainArgs train;
  auto* t = app.add_subcommand("train", "Train a codec model; flags override --config values");
  t->add_option("--manifest", train.manifest, "Training manifest")->required();
  t->add_option("--out", train.out, "Run directory for checkpoints, config.json and loss.tsv")->required();
  t->add_option("--config", train.config, "Codec config JSON");
  t->add_option("--resume", train.resume, "Continue from this checkpoint");
  const std::vector<std::pair<std::string, std::string>> override_flags = {
      {"--bottleneck", "bottleneck"},       {"--num-symbols", "num_symbols"},
      {"--downsample", "downsample_factor"}, {"--channels", "channels"},
      {"--embedding-dim", "embedding_dim"},  {"--speaker-dim", "speaker_embed_dim"},
      {"--sigma", "sigma"},                  {"--beta", "beta"},
      {"--tau-start", "tau_start"},          {"--tau-end", "tau_end"},
      {"--anneal-steps", "anneal_steps"},    {"--lr", "lr"},
      {"--batch-size", "batch_size"},        {"--crop-frames", "crop_frames"},
      {"--steps", "total_steps"},            {"--checkpoint-every", "checkpoint_every"},
      {"--seed", "seed"},
  };
  for (const auto& [flag, key] : override_flags)
    t->add_option_function<std::string>(
        flag, [&train, key = key](const std::string& v) { train.overrides[key] = v; }, "Override config '" + key + "'");
  t->add_flag("--no-speaker-conditioning", train.no_speaker_conditioning, "Train without speaker embeddings");
  t->add_flag("--paper-literal-loss", train.paper_literal_loss, "Optimize recon/(2 sigma^2) + aux unscaled");
  t->add_option("--log-every", train.log_every, "Print every N steps (0: never)")->capture_default_str();
  t->add_flag("--quiet", train.quiet, "No progress output");

  EncodeArgs enc;
  auto* e = app.add_subcommand("encode", "Write one .sym symbol file per utterance");
  e->add_option("--checkpoint", enc.checkpoint, "Model checkpoint")->required();
  e->add_option("--manifest", enc.manifest, "Manifest of utterances to encode")->required();
  e->add_option("--out", enc.out, "Output directory")->required();

  DecodeArgs dec;
  auto* d = app.add_subcommand("decode", "Decode symbol files to FBANK45 feature files");
  d->add_option("--checkpoint", dec.checkpoint, "Model checkpoint")->required();
  d->add_option("--symbols", dec.symbols, "A .sym file or a directory of them")->required();
  d->add_option("--speaker", dec.speaker, "Target speaker id");
  d->add_option("--out", dec.out, "Output directory")->required();

  AbxTaskArgs abxt;
  auto* at = app.add_subcommand("abx-task", "Build minimal-pair ABX triples from alignments");
  at->add_option("--alignments", abxt.alignments, "Alignment JSON Lines")->required();
  at->add_option("--out", abxt.out, "Task file to write")->required();
  at->add_option("--max-per-cell", abxt.opts.max_per_cell, "Triples per cell")->capture_default_str();
  at->add_option("--seed", abxt.opts.seed, "Sampling seed")->capture_default_str();

  AbxArgs abx;
  auto* ab = app.add_subcommand("abx", "ABX error rate of features or of a model's latents/outputs");
  ab->add_option("--task", abx.task, "ABX task file")->required();
  ab->add_option("--features", abx.features, "Directory of ZSFEAT1 files named <utt>.zsfeat");
  ab->add_option("--checkpoint", abx.checkpoint, "Model checkpoint");
  ab->add_option("--manifest", abx.manifest, "Manifest for --checkpoint mode");
  ab->add_option("--rep", abx.rep, "latent or output")->check(CLI::IsMember({"latent", "output"}))->capture_default_str();
  ab->add_option("--speaker", abx.speaker, "Target speaker for --rep output (default: first training speaker)");

  fs::path bitrate_symbols;
  auto* b = app.add_subcommand("bitrate", "Entropy rate in bits/s of symbol files");
  b->add_option("--symbols", bitrate_symbols, "A .sym file or a directory of them")->required();

  ReportArgs rep;
  auto* r = app.add_subcommand("report", "TSV metrics row for a checkpoint");
  r->add_option("--checkpoint", rep.checkpoint, "Model checkpoint")->required();
  r->add_option("--ablation-checkpoint", rep.ablation, "Unconditioned model for the no-conditioning column");
  r->add_option("--task", rep.task, "ABX task file")->required();
  r->add_option("--manifest", rep.manifest, "Test manifest")->required();
  r->add_option("--speaker", rep.speaker, "Target speaker (default: first training speaker)");
  r->add_option("--name", rep.name, "Model column value")->capture_default_str();
  r->add_option("--out", rep.out, "Also write the TSV here");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    const int code = app.exit(err);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (*s) return cmd_synth(synth);
    if (*f) return cmd_features(feats);
    if (*t) return cmd_train(train);
    if (*e) return cmd_encode(enc);
    if (*d) return cmd_decode(dec);
    if (*at) return cmd_abx_task(abxt);
    if (*ab) return cmd_abx(abx);
    if (*b) return cmd_bitrate(bitrate_symbols);
    if (*r) return cmd_report(rep);
  } catch (const UsageError& err) {
    std::cerr << "error: " << err.what() << '\n';
    return kUsage;
  } catch (const NumericError& err) {
    std::cerr << "numeric failure: " << err.what() << '\n';
    return kNumeric;
  } catch (const std::exception& err) {
    std::cerr << "error: " << err.what() << '\n';
    return kData;
  }
  return kUsage;
}
