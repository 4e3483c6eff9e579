#include "zslab/training.hpp"

#include "binary_io.hpp"

#include <cstdio>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>

namespace zslab {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Manifests

std::vector<ManifestEntry> read_manifest(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open manifest " + path.string());
  std::vector<ManifestEntry> entries;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const auto where = path.string() + ":" + std::to_string(lineno) + ": ";
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw FormatError(where + "invalid JSON (" + e.what() + ")");
    }
    if (!j.is_object()) throw FormatError(where + "expected an object");
    for (const auto& [key, _] : j.items())
      if (key != "id" && key != "wav" && key != "speaker") throw FormatError(where + "unknown key '" + key + "'");
    for (const char* key : {"id", "wav", "speaker"})
      if (!j.contains(key) || !j.at(key).is_string()) throw FormatError(where + "missing string field '" + key + "'");
    ManifestEntry e{j["id"].get<std::string>(), j["wav"].get<std::string>(), j["speaker"].get<std::string>()};
    if (e.wav.is_relative()) e.wav = path.parent_path() / e.wav;
    entries.push_back(std::move(e));
  }
  return entries;
}

void write_manifest(const fs::path& path, const std::vector<ManifestEntry>& entries) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write manifest " + path.string());
  for (const auto& e : entries)
    out << nlohmann::json{{"id", e.id}, {"wav", e.wav.string()}, {"speaker", e.speaker}}.dump() << '\n';
}

// ---------------------------------------------------------------------------
// Corpus

std::vector<std::string> TrainingCorpus::speakers() const {
  std::vector<std::string> out;
  for (const auto& u : utterances)
    if (std::find(out.begin(), out.end(), u.speaker) == out.end()) out.push_back(u.speaker);
  return out;
}

TrainingCorpus load_corpus(const std::vector<ManifestEntry>& manifest, const FeatureConfig& cfg) {
  if (manifest.empty()) throw std::invalid_argument("empty manifest: nothing to train on");
  TrainingCorpus corpus;
  for (const auto& e : manifest) {
    const Waveform w = read_wav(e.wav);
    TrainingUtterance u{e.id, e.speaker, mfcc39(w, cfg).frames, fbank45(w, cfg).frames};
    corpus.utterances.push_back(std::move(u));
  }
  return corpus;
}

NormStats compute_norm_stats(const TrainingCorpus& corpus) {
  const int d = CodecConfig::kInputDim;
  Eigen::VectorXd sum = Eigen::VectorXd::Zero(d), sq = Eigen::VectorXd::Zero(d);
  double count = 0;
  for (const auto& u : corpus.utterances) {
    const Eigen::MatrixXd m = u.mfcc.cast<double>();
    sum += m.colwise().sum().transpose();
    sq += m.array().square().colwise().sum().matrix().transpose();
    count += static_cast<double>(m.rows());
  }
  NormStats s;
  if (count == 0) return s;
  const Eigen::VectorXd mean = sum / count;
  const Eigen::VectorXd var = (sq / count - mean.cwiseProduct(mean)).cwiseMax(0.0);
  s.mean = mean.cast<float>();
  s.stddev = var.cwiseSqrt().cwiseMax(1e-5).cast<float>();
  return s;
}

CodecModel make_model(const CodecConfig& config, const TrainingCorpus& corpus) {
  return CodecModel(config, corpus.speakers(), compute_norm_stats(corpus));
}

Batch<float> sample_batch(const TrainingCorpus& corpus, const CodecModel& model, CounterRng& rng) {
  const auto& tc = model.config().training;
  const Index crop = tc.crop_frames, batch = tc.batch_size;
  std::vector<std::size_t> usable;
  for (std::size_t i = 0; i < corpus.utterances.size(); ++i)
    if (corpus.utterances[i].mfcc.rows() >= crop) usable.push_back(i);
  if (usable.empty())
    throw std::invalid_argument("no utterance holds a " + std::to_string(crop) + "-frame training crop");

  const Index din = CodecConfig::kInputDim, dout = CodecConfig::kOutputDim;
  Array<float> x(batch * din * crop), y(batch * dout * crop);
  Batch<float> out;
  for (Index b = 0; b < batch; ++b) {
    const auto& u = corpus.utterances[usable[rng.below(usable.size())]];
    const Index start = static_cast<Index>(rng.below(static_cast<std::uint64_t>(u.mfcc.rows() - crop + 1)));
    const RowMatrix<float> xm = model.normalize(u.mfcc.middleRows(start, crop)).transpose();
    const RowMatrix<float> ym = u.fbank.middleRows(start, crop).transpose();
    x.segment(b * din * crop, din * crop) = Eigen::Map<const Array<float>>(xm.data(), xm.size());
    y.segment(b * dout * crop, dout * crop) = Eigen::Map<const Array<float>>(ym.data(), ym.size());
    out.speakers.push_back(model.speaker_conditioned() ? model.speaker_index(u.speaker) : 0);
  }
  out.mfcc = Tensor<float>({batch, din, crop}, std::move(x));
  out.fbank = Tensor<float>({batch, dout, crop}, std::move(y));
  return out;
}

// ---------------------------------------------------------------------------
// Trainer

Trainer::Trainer(CodecModel model)
    : model_(std::move(model)), optimizer_(model_.parameter_tensors(), AdamHyper{model_.config().training.lr}) {}

LossReport Trainer::step(const TrainingCorpus& corpus) {
  const Batch<float> batch = sample_batch(corpus, model_, model_.rng());
  return train_step(model_, batch, optimizer_);
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

constexpr std::string_view kCkptMagic = "ZSCKPT1";
constexpr std::uint32_t kCkptVersion = 1;

void write_tensor(io::Writer& out, const std::string& name, const Shape& shape, const Array<float>& values) {
  out.str(name);
  out.u32(static_cast<std::uint32_t>(shape.size()));
  for (Index d : shape) out.u32(static_cast<std::uint32_t>(d));
  out.bytes(values.data(), static_cast<std::size_t>(values.size()) * sizeof(float));
}

struct RawTensor {
  Shape shape;
  Array<float> values;
};

RawTensor read_tensor(io::Reader<FormatError>& in, std::string& name) {
  name = in.str(4096);
  const auto ndim = in.u32();
  if (ndim > 8) throw FormatError(in.path().string() + ": tensor '" + name + "' has implausible rank");
  RawTensor t;
  for (std::uint32_t i = 0; i < ndim; ++i) t.shape.push_back(in.u32());
  t.values.resize(numel_of(t.shape));
  in.bytes(t.values.data(), static_cast<std::size_t>(t.values.size()) * sizeof(float));
  return t;
}

}  // namespace

void save_checkpoint(const fs::path& path, const Trainer& trainer) {
  const CodecModel& model = trainer.model();
  const fs::path tmp = path.string() + ".tmp";
  {
    io::Writer out(tmp);
    out.raw(kCkptMagic);
    out.u32(kCkptVersion);
    const nlohmann::json blob{{"codec", model.config()}, {"speakers", model.speakers()}};
    out.str(blob.dump());

    NamedTensors<float> all = model.parameters();
    for (auto& b : model.buffers()) all.push_back(b);
    out.u32(static_cast<std::uint32_t>(all.size()));
    for (const auto& [name, t] : all) write_tensor(out, name, t.shape(), t.value());

    const auto& opt = trainer.optimizer();
    const auto& st = opt.state();
    const auto params = model.parameters();
    out.u64(static_cast<std::uint64_t>(st.step));
    out.u32(static_cast<std::uint32_t>(st.m.size()));
    for (std::size_t i = 0; i < st.m.size(); ++i) {
      write_tensor(out, params[i].first + ".adam_m", params[i].second.shape(), st.m[i]);
      write_tensor(out, params[i].first + ".adam_v", params[i].second.shape(), st.v[i]);
    }

    out.str(CounterRng::kAlgorithm);
    out.u64(model.rng().state().seed);
    out.u64(model.rng().state().counter);
    out.u64(static_cast<std::uint64_t>(model.step()));

    out.u32(static_cast<std::uint32_t>(model.norm().mean.size()));
    for (float v : model.norm().mean) out.f32(v);
    for (float v : model.norm().stddev) out.f32(v);
    out.close();
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) throw std::runtime_error("cannot move checkpoint into place at " + path.string() + ": " + ec.message());
}

Trainer load_checkpoint(const fs::path& path) {
  io::Reader<FormatError> in(path);
  const auto where = path.string() + ": ";
  if (in.raw(kCkptMagic.size()) != kCkptMagic) throw FormatError(where + "bad magic, not a ZSCKPT1 checkpoint");
  const auto version = in.u32();
  if (version != kCkptVersion) throw FormatError(where + "unsupported checkpoint version " + std::to_string(version));

  CodecConfig config;
  std::vector<std::string> speakers;
  try {
    const auto blob = nlohmann::json::parse(in.str());
    config = blob.at("codec").get<CodecConfig>();
    speakers = blob.at("speakers").get<std::vector<std::string>>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(where + "bad config blob (" + e.what() + ")");
  }

  std::map<std::string, RawTensor> stored;
  const auto count = in.u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name;
    RawTensor t = read_tensor(in, name);
    stored.emplace(std::move(name), std::move(t));
  }

  AdamState<float> st;
  st.step = static_cast<std::int64_t>(in.u64());
  const auto slots = in.u32();
  for (std::uint32_t i = 0; i < slots; ++i) {
    std::string name;
    st.m.push_back(read_tensor(in, name).values);
    st.v.push_back(read_tensor(in, name).values);
  }

  const std::string algorithm = in.str(256);
  if (algorithm != CounterRng::kAlgorithm) throw FormatError(where + "unknown rng algorithm '" + algorithm + "'");
  CounterRng::State rs;
  rs.seed = in.u64();
  rs.counter = in.u64();
  const auto step = static_cast<std::int64_t>(in.u64());

  NormStats norm;
  const auto d = in.u32();
  if (d != static_cast<std::uint32_t>(CodecConfig::kInputDim)) throw FormatError(where + "bad normalization size");
  for (std::uint32_t i = 0; i < d; ++i) norm.mean[i] = in.f32();
  for (std::uint32_t i = 0; i < d; ++i) norm.stddev[i] = in.f32();

  CodecModel model(config, speakers, norm);
  NamedTensors<float> all = model.parameters();
  for (auto& b : model.buffers()) all.push_back(b);
  if (stored.size() != all.size()) throw FormatError(where + "unexpected tensor count");
  for (auto& [name, t] : all) {
    auto it = stored.find(name);
    if (it == stored.end()) throw FormatError(where + "missing tensor '" + name + "'");
    if (it->second.shape != t.shape())
      throw FormatError(where + "tensor '" + name + "' has shape " + to_string(it->second.shape) + ", expected " +
                        to_string(t.shape()));
    t.mutable_value() = it->second.values;
  }
  model.rng() = CounterRng(rs);
  model.set_step(step);

  const auto params = model.parameters();
  if (st.m.size() != params.size()) throw FormatError(where + "optimizer state does not match parameters");
  for (std::size_t i = 0; i < params.size(); ++i)
    if (st.m[i].size() != params[i].second.numel() || st.v[i].size() != params[i].second.numel())
      throw FormatError(where + "optimizer slot size mismatch for '" + params[i].first + "'");

  Trainer trainer(std::move(model));
  trainer.optimizer().state() = std::move(st);
  return trainer;
}

fs::path checkpoint_path(const fs::path& dir, std::int64_t step) {
  std::ostringstream name;
  name << "step_" << std::setw(6) << std::setfill('0') << step << ".zsckpt";
  return dir / name.str();
}

TrainingRun run_training(Trainer& trainer, const TrainingCorpus& corpus, const RunOptions& options) {
  if (corpus.utterances.empty()) throw std::invalid_argument("empty corpus: nothing to train on");
  if (!options.checkpoint_dir.empty()) fs::create_directories(options.checkpoint_dir);
  const std::int64_t total = trainer.model().config().training.total_steps;
  TrainingRun run;
  while (trainer.model().step() < total) {
    run.losses.push_back(trainer.step(corpus));
    const std::int64_t step = trainer.model().step();
    if (options.on_step) options.on_step(step, run.losses.back());
    const bool periodic = options.checkpoint_every > 0 && step % options.checkpoint_every == 0;
    if (!options.checkpoint_dir.empty() && (periodic || step == total)) {
      run.checkpoints.push_back(checkpoint_path(options.checkpoint_dir, step));
      save_checkpoint(run.checkpoints.back(), trainer);
    }
  }
  return run;
}

}  // namespace zslab
