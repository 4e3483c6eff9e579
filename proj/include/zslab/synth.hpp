#pragma once

#include "zslab/evaluation.hpp"
#include "zslab/features.hpp"
#include "zslab/training.hpp"

#include <filesystem>
#include <string>
#include <vector>

namespace zslab {

/// Phone-level alignment of one utterance, in feature frames.
struct PhoneInterval {
  std::string label;
  Index start_frame = 0;
  Index end_frame = 0;  // exclusive
};

struct Alignment {
  std::string utt;
  std::string speaker;
  std::vector<PhoneInterval> phones;
};

std::vector<Alignment> read_alignments(const std::filesystem::path& path);
void write_alignments(const std::filesystem::path& path, const std::vector<Alignment>& alignments);

/// Two-speaker toy language: "phones" are formant-like spectral envelopes on
/// a harmonic source; speakers differ by a fixed spectral tilt and pitch.
struct SynthOptions {
  std::uint64_t seed = 2019;
  double train_seconds = 60.0;
  double test_seconds = 60.0;
  double utterance_seconds = 2.0;
  int sample_rate = 16000;
};

struct SynthUtterance {
  std::string id;
  std::string speaker;
  Waveform wave;
  Alignment alignment;
};

/// Phone inventory of the toy language.
const std::vector<std::string>& synth_phones();
const std::vector<std::string>& synth_speakers();

/// Deterministic in (options.seed, speaker, index).
SynthUtterance synthesize_utterance(const std::string& id, int speaker, std::uint64_t seed, double seconds,
                                    int sample_rate = 16000);

struct SynthCorpus {
  std::vector<ManifestEntry> train, test;
  std::vector<Alignment> train_alignments, test_alignments;
};

/// Writes wav/ utterances, train.jsonl, test.jsonl, train_align.jsonl,
/// test_align.jsonl and abx_task.jsonl (over the test split) under `dir`.
SynthCorpus write_synthetic_corpus(const std::filesystem::path& dir, const SynthOptions& options = {});

struct AbxTaskOptions {
  std::size_t max_per_cell = 4;
  std::uint64_t seed = 7;
};

/// Triphone minimal-pair triples: A and X share the triphone, B differs in
/// the middle phone only, A and B share a speaker and X comes from another.
AbxTask make_abx_task(const std::vector<Alignment>& alignments, const AbxTaskOptions& options = {});

}  // namespace zslab
