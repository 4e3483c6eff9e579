#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "oracles.hpp"

#include <fstream>
#include <functional>
#include <map>

using namespace zslab;
using namespace zslab::testing;

TEST_CASE("dtw: identity, orthogonality, zero frames, dimension mismatch") {
  CounterRng rng(1);
  const auto a = random_frames(5, 3, rng);
  CHECK(dtw_cosine(a, a) < 1e-15);
  Eigen::MatrixXd e0(1, 2), e1(1, 2), z(1, 2);
  e0 << 1, 0;
  e1 << 0, 3;
  z << 0, 0;
  CHECK(dtw_cosine(e0, e1) == doctest::Approx(1.0));
  CHECK(dtw_cosine(z, z) == 0.0);
  CHECK(dtw_cosine(z, e1) == 1.0);
  CHECK_THROWS(dtw_cosine(a, random_frames(2, 4, rng)));
  CHECK_THROWS(dtw_cosine(Eigen::MatrixXd(0, 3), a));
}

TEST_CASE("dtw matches exhaustive path enumeration, is symmetric and non-negative") {
  CounterRng rng(2);
  for (int trial = 0; trial < 300; ++trial) {
    const Index n = 1 + static_cast<Index>(rng.below(6)), m = 1 + static_cast<Index>(rng.below(6));
    const Index d = 1 + static_cast<Index>(rng.below(4));
    auto a = random_frames(n, d, rng), b = random_frames(m, d, rng);
    if (rng.below(5) == 0) a.row(0).setZero();
    const double v = dtw_cosine(a, b);
    CHECK(std::abs(v - dtw_brute(a, b)) < 1e-9);
    CHECK(std::abs(v - dtw_cosine(b, a)) < 1e-12);
    CHECK(v >= 0);
  }
}

TEST_CASE("abx: perfectly separable and constant representations") {
  AbxTask task;
  Reps reps;
  Eigen::MatrixXd p(3, 2), q(2, 2), c(4, 2);
  p << 1, 0, 1, 0, 1, 0;
  q << 0, 1, 0, 1;
  c << 2, 2, 2, 2, 2, 2, 2, 2;
  reps.by_utt = {{"p0", p}, {"p1", p}, {"q0", q}, {"q1", q}};
  task.triples.push_back({{"p0", 0, 3, "p", "s0"}, {"q0", 0, 2, "q", "s0"}, {"p1", 0, 3, "p", "s1"}});
  task.triples.push_back({{"q0", 0, 2, "q", "s0"}, {"p0", 0, 3, "p", "s0"}, {"q1", 0, 2, "q", "s1"}});
  task.triples.push_back({{"p0", 0, 2, "p", "s0"}, {"q0", 0, 1, "q", "s0"}, {"p1", 1, 3, "p", "s1"}});
  CHECK(abx_error_rate(task, reps.source()).error_rate == 0.0);

  for (auto& [_, m] : reps.by_utt) m = c.topRows(m.rows());
  const auto r = abx_error_rate(task, reps.source());
  CHECK(r.error_rate == 0.5);
  CHECK(r.num_triples == 3);
  CHECK(r.num_cells == 2);

  CHECK_THROWS(abx_error_rate(AbxTask{}, reps.source()));
  task.triples.push_back({{"p0", 0, 9, "p", "s0"}, {"q0", 0, 1, "q", "s0"}, {"p1", 0, 1, "p", "s1"}});
  CHECK_THROWS(abx_error_rate(task, reps.source()));
}

TEST_CASE("abx: cells are averaged, then macro-averaged") {
  // Cell (p, q, s0, s1) has three triples scoring 1, 0, 0; cell (q, p, s0, s1) one triple scoring 0.
  Eigen::MatrixXd p(1, 2), q(1, 2);
  p << 1, 0;
  q << 0, 1;
  Reps reps;
  reps.by_utt = {{"p", p}, {"q", q}, {"odd", q}};
  AbxTask task;
  task.triples.push_back({{"p", 0, 1, "p", "s0"}, {"q", 0, 1, "q", "s0"}, {"odd", 0, 1, "p", "s1"}});  // error
  task.triples.push_back({{"p", 0, 1, "p", "s0"}, {"q", 0, 1, "q", "s0"}, {"p", 0, 1, "p", "s1"}});
  task.triples.push_back({{"p", 0, 1, "p", "s0"}, {"q", 0, 1, "q", "s0"}, {"p", 0, 1, "p", "s1"}});
  task.triples.push_back({{"q", 0, 1, "q", "s0"}, {"p", 0, 1, "p", "s0"}, {"q", 0, 1, "q", "s1"}});
  const auto r = abx_error_rate(task, reps.source());
  CHECK(r.num_cells == 2);
  CHECK(r.error_rate == doctest::Approx((1.0 / 3.0 + 0.0) / 2.0));
}

TEST_CASE("abx: Gaussian clusters versus i.i.d. noise") {
  CounterRng rng(3);
  auto sep = clusters(rng, 8, 3.0, 0.3);
  CHECK(abx_error_rate(sep.task, sep.reps.source()).error_rate < 0.05);
  auto noise = clusters(rng, 5000, 0.0, 1.0);
  CHECK(std::abs(abx_error_rate(noise.task, noise.reps.source()).error_rate - 0.5) < 0.02);
}

TEST_CASE("abx: invariant to positive rescaling and to k-fold frame duplication") {
  CounterRng rng(4);
  auto setup = clusters(rng, 5, 1.0, 0.7);
  const double base = abx_error_rate(setup.task, setup.reps.source()).error_rate;

  Reps scaled = setup.reps;
  for (auto& [_, m] : scaled.by_utt) m *= 3.7;
  CHECK(abx_error_rate(setup.task, scaled.source()).error_rate == doctest::Approx(base));

  for (Index k : {2, 3}) {
    Reps dup;
    AbxTask task = setup.task;
    for (const auto& [u, m] : setup.reps.by_utt) {
      Eigen::MatrixXd d(m.rows() * k, m.cols());
      for (Index r = 0; r < m.rows(); ++r)
        for (Index j = 0; j < k; ++j) d.row(r * k + j) = m.row(r);
      dup.by_utt[u] = d;
    }
    for (auto& t : task.triples)
      for (SegmentRef* s : {&t.a, &t.b, &t.x}) {
        s->start_frame *= k;
        s->end_frame *= k;
      }
    CHECK(abx_error_rate(task, dup.source()).error_rate == doctest::Approx(base));
  }
}

TEST_CASE("abx task files round-trip and reject malformed lines") {
  const auto dir = scratch_dir("abx");
  AbxTask task;
  task.triples.push_back({{"u1", 0, 5, "a-b+c", "s0"}, {"u2", 3, 9, "a-d+c", "s0"}, {"u3", 1, 4, "a-b+c", "s1"}});
  write_abx_task(dir / "t.jsonl", task);
  const auto back = read_abx_task(dir / "t.jsonl");
  REQUIRE(back.triples.size() == 1);
  CHECK(back.triples[0].b.utt == "u2");
  CHECK(back.triples[0].b.start_frame == 3);
  CHECK(back.triples[0].x.speaker == "s1");

  std::ofstream(dir / "bad.jsonl") << "{\"a\": 1}\n";
  CHECK_THROWS_AS(read_abx_task(dir / "bad.jsonl"), FormatError);
  std::ofstream(dir / "bad2.jsonl")
      << R"({"a":{"utt":"u","start_frame":4,"end_frame":4,"label":"l","speaker":"s"},"b":{"utt":"u","start_frame":0,"end_frame":4,"label":"l","speaker":"s"},"x":{"utt":"u","start_frame":0,"end_frame":4,"label":"l","speaker":"s"}})"
      << "\n";
  CHECK_THROWS_AS(read_abx_task(dir / "bad2.jsonl"), FormatError);
}

TEST_CASE("bitrate: worked examples and entropy oracle") {
  SymbolStream s;
  for (int i = 0; i < 1000; ++i) s.symbols.push_back(i % 4);
  s.duration = 10.0;
  CHECK(bitrate(s) == 200.0);

  SymbolStream one{std::vector<std::int64_t>(50, 7), 2.0};
  CHECK(bitrate(one) == 0.0);

  CounterRng rng(5);
  for (int trial = 0; trial < 100; ++trial) {
    SymbolStream r;
    const auto k = 1 + rng.below(40);
    const auto n = 1 + rng.below(3000);
    for (std::uint64_t i = 0; i < n; ++i) r.symbols.push_back(static_cast<std::int64_t>(rng.below(k) * 13));
    r.duration = rng.uniform(0.5, 30);
    std::map<std::int64_t, double> hist;
    for (auto v : r.symbols) hist[v] += 1;
    double h = 0;
    for (const auto& [_, c] : hist) h -= c / static_cast<double>(n) * std::log2(c / static_cast<double>(n));
    const double expect = static_cast<double>(n) / r.duration * h;
    CHECK(std::abs(bitrate(r) - expect) < 1e-9);

    SymbolStream relabeled = r;
    for (auto& v : relabeled.symbols) v = 1000 - v;
    CHECK(std::abs(bitrate(relabeled) - bitrate(r)) < 1e-9);
  }
  CHECK_THROWS(bitrate(SymbolStream{}));
  CHECK_THROWS(bitrate(SymbolStream{{1, 2}, 0.0}));
}

TEST_CASE("symbol files round-trip with their sidecar") {
  const auto dir = scratch_dir("sym");
  SymbolSequence seq{"utt7", {3, 1, 4, 1, 5}, 4, 0.01, 19};
  write_symbol_file(dir / "utt7.sym", seq);
  std::ifstream in(dir / "utt7.sym");
  std::string l1, l2;
  std::getline(in, l1);
  std::getline(in, l2);
  CHECK(l1 == "utt7");
  CHECK(l2 == "3 1 4 1 5");
  const auto back = read_symbol_file(dir / "utt7.sym");
  CHECK(back.utterance_id == "utt7");
  CHECK(back.symbol_ids == seq.symbol_ids);
  CHECK(back.frames_per_symbol == 4);
  CHECK(back.num_frames == 19);
  CHECK(back.duration() == doctest::Approx(0.19));

  std::ofstream(dir / "bad.sym") << "u\n1 x 2\n";
  std::ofstream(dir / "bad.sym.json") << R"({"frames_per_symbol": 4, "frame_shift": 0.01})";
  CHECK_THROWS_AS(read_symbol_file(dir / "bad.sym"), FormatError);
  std::ofstream(dir / "nometa.sym") << "u\n1 2\n";
  CHECK_THROWS_AS(read_symbol_file(dir / "nometa.sym"), FormatError);
}

TEST_CASE("report TSV marks unavailable columns") {
  ReportRow row;
  row.model = "vq";
  row.abx_latent = 0.251;
  row.abx_output_spkr_cond = 0.2;
  row.bitrate = 123.456;
  row.codebook_utilization = 0.5;
  const std::string tsv = report_tsv({row});
  CHECK(tsv ==
        "model\tabx_latent\tabx_output_spkr_cond\tabx_output_no_spkr_cond\tbitrate\tcodebook_utilization\n"
        "vq\t25.10\t20.00\tNA\t123.46\t0.5000\n");
}
