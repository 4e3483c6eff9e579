#include "zslab/evaluation.hpp"

#include <cmath>
#include <fstream>
#include <iomanip>
#include <map>
#include <set>
#include <sstream>
#include <tuple>
#include <unordered_map>

namespace zslab {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// DTW

double cosine_distance(const Eigen::Ref<const Eigen::RowVectorXd>& u, const Eigen::Ref<const Eigen::RowVectorXd>& v) {
  const double nu = u.norm(), nv = v.norm();
  if (nu == 0 || nv == 0) return (nu == 0 && nv == 0) ? 0.0 : 1.0;
  return 1.0 - u.dot(v) / (nu * nv);
}

double dtw_cosine(const Eigen::Ref<const Eigen::MatrixXd>& a, const Eigen::Ref<const Eigen::MatrixXd>& b) {
  if (a.rows() == 0 || b.rows() == 0) throw std::invalid_argument("dtw_cosine: empty sequence");
  if (a.cols() != b.cols())
    throw ShapeError("dtw_cosine: dimension mismatch " + std::to_string(a.cols()) + " vs " + std::to_string(b.cols()));
  const Index n = a.rows(), m = b.rows();

  // Local costs via normalized rows; zero rows handled separately.
  Eigen::VectorXd na = a.rowwise().norm(), nb = b.rowwise().norm();
  Eigen::MatrixXd cost = Eigen::MatrixXd::Zero(n, m);
  {
    Eigen::MatrixXd ua = a, ub = b;
    for (Index i = 0; i < n; ++i)
      if (na[i] > 0) ua.row(i) /= na[i];
    for (Index j = 0; j < m; ++j)
      if (nb[j] > 0) ub.row(j) /= nb[j];
    cost = (1.0 - (ua * ub.transpose()).array()).matrix();
    for (Index i = 0; i < n; ++i)
      for (Index j = 0; j < m; ++j)
        if (na[i] == 0 || nb[j] == 0) cost(i, j) = (na[i] == 0 && nb[j] == 0) ? 0.0 : 1.0;
    cost = cost.cwiseMax(0.0);
  }

  // Lexicographic (sum, length) minimization.
  struct Cell {
    double sum;
    Index len;
    bool operator<(const Cell& o) const { return sum < o.sum || (sum == o.sum && len < o.len); }
  };
  std::vector<Cell> prev(static_cast<std::size_t>(m)), cur(static_cast<std::size_t>(m));
  for (Index i = 0; i < n; ++i) {
    for (Index j = 0; j < m; ++j) {
      Cell best{0.0, 0};
      if (i == 0 && j == 0) {
        best = {0.0, 0};
      } else {
        bool have = false;
        auto consider = [&](const Cell& c) {
          if (!have || c < best) best = c;
          have = true;
        };
        if (i > 0 && j > 0) consider(prev[static_cast<std::size_t>(j - 1)]);
        if (i > 0) consider(prev[static_cast<std::size_t>(j)]);
        if (j > 0) consider(cur[static_cast<std::size_t>(j - 1)]);
      }
      cur[static_cast<std::size_t>(j)] = {best.sum + cost(i, j), best.len + 1};
    }
    std::swap(prev, cur);
  }
  const Cell& end = prev[static_cast<std::size_t>(m - 1)];
  return end.sum / static_cast<double>(end.len);
}

// ---------------------------------------------------------------------------
// ABX task files

namespace {

nlohmann::json segment_json(const SegmentRef& s) {
  return {{"utt", s.utt}, {"start_frame", s.start_frame}, {"end_frame", s.end_frame}, {"label", s.label},
          {"speaker", s.speaker}};
}

SegmentRef parse_segment(const nlohmann::json& j, const std::string& where) {
  if (!j.is_object()) throw FormatError(where + "segment must be an object");
  for (const auto& [key, _] : j.items())
    if (key != "utt" && key != "start_frame" && key != "end_frame" && key != "label" && key != "speaker")
      throw FormatError(where + "unknown segment key '" + key + "'");
  try {
    SegmentRef s{j.at("utt").get<std::string>(), j.at("start_frame").get<Index>(), j.at("end_frame").get<Index>(),
                 j.at("label").get<std::string>(), j.at("speaker").get<std::string>()};
    if (s.start_frame < 0 || s.end_frame <= s.start_frame) throw FormatError(where + "segment needs end > start >= 0");
    return s;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(where + "bad segment (" + e.what() + ")");
  }
}

}  // namespace

AbxTask read_abx_task(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open ABX task " + path.string());
  AbxTask task;
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
    if (!j.is_object() || j.size() != 3 || !j.contains("a") || !j.contains("b") || !j.contains("x"))
      throw FormatError(where + "expected {\"a\", \"b\", \"x\"}");
    task.triples.push_back({parse_segment(j["a"], where), parse_segment(j["b"], where), parse_segment(j["x"], where)});
  }
  return task;
}

void write_abx_task(const fs::path& path, const AbxTask& task) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write ABX task " + path.string());
  for (const auto& t : task.triples)
    out << nlohmann::json{{"a", segment_json(t.a)}, {"b", segment_json(t.b)}, {"x", segment_json(t.x)}}.dump() << '\n';
}

// ---------------------------------------------------------------------------
// ABX

AbxResult abx_error_rate(const AbxTask& task, const RepresentationSource& source) {
  if (task.triples.empty()) throw std::invalid_argument("abx_error_rate: empty task");
  auto slice = [&source](const SegmentRef& s) -> Eigen::MatrixXd {
    const Eigen::MatrixXd& rep = source(s.utt);
    if (s.end_frame > rep.rows())
      throw std::out_of_range("segment " + s.utt + "[" + std::to_string(s.start_frame) + ", " +
                              std::to_string(s.end_frame) + ") exceeds " + std::to_string(rep.rows()) + " frames");
    return rep.middleRows(s.start_frame, s.end_frame - s.start_frame);
  };

  using CellKey = std::tuple<std::string, std::string, std::string, std::string>;
  std::map<CellKey, std::pair<double, std::size_t>> cells;
  for (const auto& t : task.triples) {
    const Eigen::MatrixXd x = slice(t.x);
    const double dax = dtw_cosine(slice(t.a), x);
    const double dbx = dtw_cosine(slice(t.b), x);
    const double score = dax > dbx ? 1.0 : (dax == dbx ? 0.5 : 0.0);
    auto& cell = cells[{t.a.label, t.b.label, t.a.speaker, t.x.speaker}];
    cell.first += score;
    ++cell.second;
  }
  double total = 0;
  for (const auto& [_, c] : cells) total += c.first / static_cast<double>(c.second);
  return {total / static_cast<double>(cells.size()), task.triples.size(), cells.size()};
}

// ---------------------------------------------------------------------------
// Bitrate

double bitrate(const SymbolStream& stream) {
  if (stream.symbols.empty()) throw std::invalid_argument("bitrate: empty symbol stream");
  if (!(stream.duration > 0)) throw std::invalid_argument("bitrate: duration must be positive");
  std::unordered_map<std::int64_t, std::size_t> counts;
  for (auto s : stream.symbols) ++counts[s];
  const double m = static_cast<double>(stream.symbols.size());
  // Sum in sorted-count order so the result does not depend on hash iteration.
  std::vector<std::size_t> sorted;
  for (const auto& [_, c] : counts) sorted.push_back(c);
  std::sort(sorted.begin(), sorted.end());
  double entropy = 0;
  for (std::size_t c : sorted) {
    const double p = static_cast<double>(c) / m;
    entropy -= p * std::log2(p);
  }
  return m / stream.duration * entropy;
}

SymbolStream make_stream(const std::vector<SymbolSequence>& sequences) {
  SymbolStream s;
  for (const auto& seq : sequences) {
    s.symbols.insert(s.symbols.end(), seq.symbol_ids.begin(), seq.symbol_ids.end());
    s.duration += seq.duration();
  }
  return s;
}

// ---------------------------------------------------------------------------
// Symbol files

void write_symbol_file(const fs::path& path, const SymbolSequence& seq) {
  {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write symbol file " + path.string());
    out << seq.utterance_id << '\n';
    for (std::size_t i = 0; i < seq.symbol_ids.size(); ++i) out << (i ? " " : "") << seq.symbol_ids[i];
    out << '\n';
  }
  std::ofstream meta(path.string() + ".json");
  if (!meta) throw std::runtime_error("cannot write symbol sidecar for " + path.string());
  meta << nlohmann::json{{"utterance_id", seq.utterance_id},
                         {"num_symbols", seq.symbol_ids.size()},
                         {"frames_per_symbol", seq.frames_per_symbol},
                         {"frame_shift", seq.frame_shift},
                         {"num_frames", seq.num_frames},
                         {"duration", seq.duration()}}
              .dump(2)
       << '\n';
}

SymbolSequence read_symbol_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open symbol file " + path.string());
  SymbolSequence seq;
  std::string ids;
  if (!std::getline(in, seq.utterance_id) || seq.utterance_id.empty())
    throw FormatError(path.string() + ": missing utterance id line");
  std::getline(in, ids);
  std::istringstream is(ids);
  std::string tok;
  while (is >> tok) {
    std::size_t used = 0;
    long long v = 0;
    try {
      v = std::stoll(tok, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used != tok.size() || v < 0) throw FormatError(path.string() + ": bad symbol id '" + tok + "'");
    seq.symbol_ids.push_back(v);
  }

  const fs::path sidecar = path.string() + ".json";
  std::ifstream meta(sidecar);
  if (!meta) throw FormatError("missing sidecar " + sidecar.string());
  try {
    const auto j = nlohmann::json::parse(meta);
    seq.frames_per_symbol = j.at("frames_per_symbol").get<int>();
    seq.frame_shift = j.at("frame_shift").get<double>();
    if (j.contains("num_frames")) seq.num_frames = j.at("num_frames").get<Index>();
    // An explicit duration takes precedence over num_frames * frame_shift.
    if (j.contains("duration")) {
      const double d = j.at("duration").get<double>();
      if (seq.frame_shift > 0) seq.num_frames = static_cast<Index>(std::llround(d / seq.frame_shift));
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(sidecar.string() + ": bad sidecar (" + e.what() + ")");
  }
  return seq;
}

// ---------------------------------------------------------------------------
// Reports

Eigen::MatrixXd latent_representation(const CodecModel& model, const SymbolSequence& seq) {
  const Tensor<float> z = model.symbols_to_latent(seq.symbol_ids);  // [1, d, N]
  const Index d = z.dim(1), n = z.dim(2), r = seq.frames_per_symbol;
  Eigen::Map<const RowMatrix<float>> zm(z.value().data(), d, n);
  Eigen::MatrixXd rep(n * r, d);
  for (Index i = 0; i < n; ++i)
    for (Index k = 0; k < r; ++k) rep.row(i * r + k) = zm.col(i).transpose().cast<double>();
  return rep;
}

namespace {

using RepMap = std::unordered_map<std::string, Eigen::MatrixXd>;

RepresentationSource lookup(const RepMap& reps) {
  return [&reps](const std::string& utt) -> const Eigen::MatrixXd& {
    auto it = reps.find(utt);
    if (it == reps.end()) throw std::out_of_range("no representation for utterance '" + utt + "'");
    return it->second;
  };
}

}  // namespace

ReportRow eval_report(CodecModel& model, CodecModel* ablation, const AbxTask& task,
                      const std::vector<ManifestEntry>& test, const ReportOptions& options, const std::string& name) {
  if (test.empty()) throw std::invalid_argument("eval_report: empty test manifest");
  const std::string target = options.target_speaker.empty()
                                 ? (model.speakers().empty() ? std::string() : model.speakers().front())
                                 : options.target_speaker;
  RepMap latent, output, output_ablation;
  std::vector<SymbolSequence> sequences;
  for (const auto& e : test) {
    FeatureSequence mfcc = mfcc39(read_wav(e.wav));
    mfcc.utterance_id = e.id;
    auto enc = encode(model, mfcc);
    latent[e.id] = latent_representation(model, enc.symbols);
    output[e.id] = decode(model, enc.z, target).frames.cast<double>();
    sequences.push_back(std::move(enc.symbols));
    if (ablation) {
      auto enc_ab = encode(*ablation, mfcc);
      const std::string ab_target = ablation->speaker_conditioned() ? target : std::string();
      output_ablation[e.id] = decode(*ablation, enc_ab.z, ab_target).frames.cast<double>();
    }
  }

  ReportRow row;
  row.model = name;
  row.abx_latent = abx_error_rate(task, lookup(latent)).error_rate;
  const double abx_out = abx_error_rate(task, lookup(output)).error_rate;
  if (model.speaker_conditioned())
    row.abx_output_spkr_cond = abx_out;
  else
    row.abx_output_no_spkr_cond = abx_out;
  if (ablation) row.abx_output_no_spkr_cond = abx_error_rate(task, lookup(output_ablation)).error_rate;

  const SymbolStream stream = make_stream(sequences);
  row.bitrate = bitrate(stream);
  std::set<std::int64_t> used(stream.symbols.begin(), stream.symbols.end());
  row.codebook_utilization = static_cast<double>(used.size()) / model.config().num_symbols;
  return row;
}

std::string report_tsv(const std::vector<ReportRow>& rows) {
  std::ostringstream os;
  os << "model\tabx_latent\tabx_output_spkr_cond\tabx_output_no_spkr_cond\tbitrate\tcodebook_utilization\n";
  auto pct = [&os](const std::optional<double>& v) {
    if (v)
      os << std::fixed << std::setprecision(2) << 100.0 * *v;
    else
      os << "NA";
  };
  for (const auto& r : rows) {
    os << r.model << '\t';
    pct(r.abx_latent);
    os << '\t';
    pct(r.abx_output_spkr_cond);
    os << '\t';
    pct(r.abx_output_no_spkr_cond);
    os << '\t' << std::fixed << std::setprecision(2) << r.bitrate << '\t' << std::setprecision(4)
       << r.codebook_utilization << '\n';
  }
  return os.str();
}

}  // namespace zslab
