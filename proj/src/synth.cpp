#include "zslab/synth.hpp"

#include "zslab/rng.hpp"

#include <array>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <map>
#include <numbers>
#include <sstream>

namespace zslab {

namespace fs = std::filesystem;

namespace {

struct PhoneSpec {
  const char* label;
  std::array<double, 3> formants;  // Hz
};

// Formant-like envelopes, loosely vowel-shaped plus one high "fricative" band.
constexpr std::array<PhoneSpec, 6> kPhones{{
    {"a", {750, 1250, 2600}},
    {"i", {300, 2300, 3100}},
    {"u", {330, 850, 2300}},
    {"e", {480, 1850, 2550}},
    {"o", {520, 950, 2450}},
    {"s", {4200, 5400, 6600}},
}};

struct SpeakerSpec {
  const char* id;
  double tilt;  // amplitude exponent on f / 1 kHz
  double f0;    // Hz
};

constexpr std::array<SpeakerSpec, 2> kSpeakers{{
    {"spk0", -1.2, 115.0},
    {"spk1", 0.4, 190.0},
}};

constexpr int kHop = 160;
constexpr int kWindow = 400;

Index sample_to_frame(Index sample) {
  // First frame whose window centre is at or after `sample`.
  const Index centred = sample - kWindow / 2;
  return centred <= 0 ? 0 : (centred + kHop - 1) / kHop;
}

double envelope(const PhoneSpec& phone, const SpeakerSpec& spk, double f) {
  double a = 0.02;
  for (double formant : phone.formants) {
    const double bw = 90.0 + 0.06 * formant;
    a += std::exp(-0.5 * (f - formant) * (f - formant) / (bw * bw));
  }
  return a * std::pow(std::max(f, 50.0) / 1000.0, spk.tilt);
}

}  // namespace

const std::vector<std::string>& synth_phones() {
  static const std::vector<std::string> phones = [] {
    std::vector<std::string> v;
    for (const auto& p : kPhones) v.emplace_back(p.label);
    return v;
  }();
  return phones;
}

const std::vector<std::string>& synth_speakers() {
  static const std::vector<std::string> speakers = [] {
    std::vector<std::string> v;
    for (const auto& s : kSpeakers) v.emplace_back(s.id);
    return v;
  }();
  return speakers;
}

SynthUtterance synthesize_utterance(const std::string& id, int speaker, std::uint64_t seed, double seconds,
                                    int sample_rate) {
  const SpeakerSpec& spk = kSpeakers.at(static_cast<std::size_t>(speaker));
  CounterRng rng(seed);
  const Index total = static_cast<Index>(std::llround(seconds * sample_rate));

  // Phone sequence with durations of 70-130 ms, no immediate repeats.
  struct Seg {
    std::size_t phone;
    Index start, end;
  };
  std::vector<Seg> segs;
  std::size_t last = kPhones.size();
  for (Index pos = 0; pos < total;) {
    std::size_t p;
    do p = rng.below(kPhones.size());
    while (p == last);
    last = p;
    const Index len = static_cast<Index>(rng.uniform(0.070, 0.130) * sample_rate);
    segs.push_back({p, pos, std::min(pos + len, total)});
    pos += len;
  }

  const int harmonics = static_cast<int>(7600.0 / (spk.f0 * 1.04));
  // Per-phone harmonic amplitudes at the nominal pitch.
  std::vector<std::vector<double>> amp(kPhones.size(), std::vector<double>(static_cast<std::size_t>(harmonics)));
  for (std::size_t p = 0; p < kPhones.size(); ++p)
    for (int h = 0; h < harmonics; ++h) amp[p][static_cast<std::size_t>(h)] = envelope(kPhones[p], spk, spk.f0 * (h + 1));

  std::vector<double> phase(static_cast<std::size_t>(harmonics));
  for (auto& ph : phase) ph = rng.uniform(0.0, 2.0 * std::numbers::pi);

  const Index xfade = sample_rate * 15 / 1000;
  const double vibrato_rate = rng.uniform(3.0, 5.0);
  std::vector<double> out(static_cast<std::size_t>(total));
  std::size_t seg = 0;
  for (Index n = 0; n < total; ++n) {
    while (n >= segs[seg].end) ++seg;
    // Blend toward the next phone over the last `xfade` samples of a segment.
    double w_next = 0;
    if (seg + 1 < segs.size() && segs[seg].end - n <= xfade)
      w_next = 0.5 * (1.0 - static_cast<double>(segs[seg].end - n) / xfade);
    if (seg > 0 && n - segs[seg].start < xfade)
      w_next = -0.5 * (1.0 - static_cast<double>(n - segs[seg].start) / xfade);
    const std::size_t cur = segs[seg].phone;
    const std::size_t other = w_next > 0 ? segs[seg + 1].phone : (w_next < 0 ? segs[seg - 1].phone : cur);
    const double w = std::abs(w_next);

    const double f0 = spk.f0 * (1.0 + 0.03 * std::sin(2.0 * std::numbers::pi * vibrato_rate * n / sample_rate));
    double s = 0;
    for (int h = 0; h < harmonics; ++h) {
      const auto hi = static_cast<std::size_t>(h);
      phase[hi] += 2.0 * std::numbers::pi * f0 * (h + 1) / sample_rate;
      if (phase[hi] > 2.0 * std::numbers::pi) phase[hi] -= 2.0 * std::numbers::pi;
      s += ((1.0 - w) * amp[cur][hi] + w * amp[other][hi]) * std::sin(phase[hi]);
    }
    out[static_cast<std::size_t>(n)] = s;
  }

  double peak = 1e-9;
  for (double v : out) peak = std::max(peak, std::abs(v));
  SynthUtterance u;
  u.id = id;
  u.speaker = spk.id;
  u.wave.sample_rate = sample_rate;
  u.wave.samples.resize(out.size());
  for (std::size_t i = 0; i < out.size(); ++i)
    u.wave.samples[i] = static_cast<float>(std::clamp(0.5 * out[i] / peak + 0.003 * rng.normal(), -1.0, 1.0));

  const Index frames = total >= kWindow ? 1 + (total - kWindow) / kHop : 0;
  u.alignment.utt = id;
  u.alignment.speaker = spk.id;
  for (const auto& sgm : segs) {
    const Index a = std::min(sample_to_frame(sgm.start), frames);
    const Index b = std::min(sample_to_frame(sgm.end), frames);
    if (b > a) u.alignment.phones.push_back({kPhones[sgm.phone].label, a, b});
  }
  return u;
}

// ---------------------------------------------------------------------------
// Alignment files: one JSON object per utterance.

std::vector<Alignment> read_alignments(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open alignment file " + path.string());
  std::vector<Alignment> out;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      Alignment a{j.at("utt").get<std::string>(), j.at("speaker").get<std::string>(), {}};
      for (const auto& p : j.at("phones"))
        a.phones.push_back({p.at("label").get<std::string>(), p.at("start_frame").get<Index>(),
                            p.at("end_frame").get<Index>()});
      out.push_back(std::move(a));
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(path.string() + ":" + std::to_string(lineno) + ": bad alignment (" + e.what() + ")");
    }
  }
  return out;
}

void write_alignments(const fs::path& path, const std::vector<Alignment>& alignments) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write alignment file " + path.string());
  for (const auto& a : alignments) {
    nlohmann::json phones = nlohmann::json::array();
    for (const auto& p : a.phones)
      phones.push_back({{"label", p.label}, {"start_frame", p.start_frame}, {"end_frame", p.end_frame}});
    out << nlohmann::json{{"utt", a.utt}, {"speaker", a.speaker}, {"phones", phones}}.dump() << '\n';
  }
}

// ---------------------------------------------------------------------------

SynthCorpus write_synthetic_corpus(const fs::path& dir, const SynthOptions& options) {
  fs::create_directories(dir / "wav");
  SynthCorpus corpus;
  const int per_split_train = std::max(1, static_cast<int>(std::lround(options.train_seconds / options.utterance_seconds)));
  const int per_split_test = std::max(1, static_cast<int>(std::lround(options.test_seconds / options.utterance_seconds)));
  const int n_spk = static_cast<int>(kSpeakers.size());

  auto make_split = [&](const std::string& split, int count, std::uint64_t salt, std::vector<ManifestEntry>& entries,
                        std::vector<Alignment>& aligns) {
    const CounterRng base = CounterRng(options.seed).split(salt);
    for (int i = 0; i < count; ++i) {
      const int spk = i % n_spk;
      std::ostringstream id;
      id << split << "_" << kSpeakers[static_cast<std::size_t>(spk)].id << "_" << std::setw(3) << std::setfill('0') << i;
      const std::uint64_t seed = base.split(static_cast<std::uint64_t>(i)).state().seed;
      SynthUtterance u = synthesize_utterance(id.str(), spk, seed, options.utterance_seconds, options.sample_rate);
      const fs::path rel = fs::path("wav") / (u.id + ".wav");
      write_wav(dir / rel, u.wave);
      entries.push_back({u.id, dir / rel, u.speaker});
      aligns.push_back(std::move(u.alignment));
    }
  };
  make_split("train", per_split_train, 1, corpus.train, corpus.train_alignments);
  make_split("test", per_split_test, 2, corpus.test, corpus.test_alignments);

  // Manifests store paths relative to the corpus directory.
  auto relative = [&dir](std::vector<ManifestEntry> entries) {
    for (auto& e : entries) e.wav = fs::relative(e.wav, dir);
    return entries;
  };
  write_manifest(dir / "train.jsonl", relative(corpus.train));
  write_manifest(dir / "test.jsonl", relative(corpus.test));
  write_alignments(dir / "train_align.jsonl", corpus.train_alignments);
  write_alignments(dir / "test_align.jsonl", corpus.test_alignments);
  write_abx_task(dir / "abx_task.jsonl", make_abx_task(corpus.test_alignments));
  return corpus;
}

AbxTask make_abx_task(const std::vector<Alignment>& alignments, const AbxTaskOptions& options) {
  struct Key {
    std::string prev, mid, next;
    auto operator<=>(const Key&) const = default;
  };
  // triphone -> speaker -> instances
  std::map<Key, std::map<std::string, std::vector<SegmentRef>>> index;
  for (const auto& a : alignments)
    for (std::size_t i = 1; i + 1 < a.phones.size(); ++i) {
      const auto &p = a.phones[i - 1], &m = a.phones[i], &n = a.phones[i + 1];
      const std::string label = p.label + "-" + m.label + "+" + n.label;
      index[{p.label, m.label, n.label}][a.speaker].push_back({a.utt, p.start_frame, n.end_frame, label, a.speaker});
    }

  CounterRng rng(options.seed);
  AbxTask task;
  for (const auto& [ka, by_spk_a] : index)
    for (const auto& [kb, by_spk_b] : index) {
      if (ka.prev != kb.prev || ka.next != kb.next || ka.mid == kb.mid) continue;
      for (const auto& [s1, as] : by_spk_a) {
        auto bit = by_spk_b.find(s1);
        if (bit == by_spk_b.end()) continue;
        const auto& bs = bit->second;
        for (const auto& [s2, xs] : by_spk_a) {
          if (s2 == s1) continue;
          const std::size_t combos = as.size() * bs.size() * xs.size();
          const std::size_t take = std::min(combos, options.max_per_cell);
          // Evenly spaced picks through the combination space, with a random offset.
          const std::size_t offset = rng.below(combos);
          for (std::size_t t = 0; t < take; ++t) {
            std::size_t c = (offset + t * combos / take) % combos;
            const auto& xa = as[c % as.size()];
            c /= as.size();
            const auto& xb = bs[c % bs.size()];
            c /= bs.size();
            task.triples.push_back({xa, xb, xs[c % xs.size()]});
          }
        }
      }
    }
  return task;
}

}  // namespace zslab
