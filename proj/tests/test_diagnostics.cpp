#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <string>
#include <vector>

#include "osm/diagnostics.hpp"
#include "osm/models.hpp"
#include "support/test_util.hpp"

using namespace osm;
using namespace testutil;

namespace {

// Largest |P^2 - P| deviation in Frobenius norm.
double idempotence_defect(const Matrix& p) { return fro_norm(sub(matmul(p, p), p)); }

double symmetry_defect(const Matrix& p) { return fro_norm(sub(adjoint(p), p)); }

}  // namespace

TEST_CASE("drift measures the group constraint") {
  SECTION("exact elements have drift at roundoff") {
    REQUIRE(drift(Matrix::identity(4, Field::Real)) == 0.0);
    Rng rng(3);
    for (const SubgroupSpec g :
         {SubgroupSpec{SubgroupFamily::SO, 5}, SubgroupSpec{SubgroupFamily::U, 3},
          SubgroupSpec{SubgroupFamily::SU, 4}, SubgroupSpec{SubgroupFamily::Torus, 6}}) {
      for (int k = 0; k < 5; ++k) {
        REQUIRE(drift(random_group_element(g, rng)) < 1e-13);
      }
    }
  }

  SECTION("a uniform 1 percent scale of the identity") {
    Matrix h = Matrix::identity(2, Field::Real);
    h.re(0, 0) = 1.01;
    h.re(1, 1) = 1.01;
    REQUIRE(drift(h) == Catch::Approx(0.0201 * std::sqrt(2.0)).epsilon(1e-13));
    REQUIRE(drift(h) == Catch::Approx(0.02843).margin(5e-6));
  }

  SECTION("one exact update step from an exact element stays below 1e-12") {
    Rng rng(11);
    for (const SubgroupSpec g :
         {SubgroupSpec{SubgroupFamily::SO, 6}, SubgroupSpec{SubgroupFamily::U, 4}}) {
      const Matrix h = random_group_element(g, rng);
      const Matrix u = random_tangent(g, rng, 0.5);
      REQUIRE(drift(matmul(h, expm(u))) < 1e-12);
      REQUIRE(drift(matmul(h, cayley(u))) < 1e-12);
    }
  }

  SECTION("ten thousand recurrent steps under the re-projection schedule") {
    Rng rng(29);
    const SubgroupSpec g{SubgroupFamily::SO, 4};
    RnnParams p = make_rnn(g, 3, MixingMode::PerDirectionScale, UpdateMap::Expm, rng);
    std::vector<int> tokens;
    tokens.reserve(10000);
    for (int t = 0; t < 10000; ++t) tokens.push_back((t * 7 + t / 13) % 3);
    const ForwardResult fr = rnn_forward(p, tokens);
    double worst = 0.0;
    for (const Matrix& h : fr.states) worst = std::max(worst, drift(h));
    REQUIRE(worst < 1e-8);
  }
}

TEST_CASE("channel split separates readout-visible directions") {
  Rng rng(17);

  SECTION("zero temperature sees nothing") {
    const SubgroupSpec g{SubgroupFamily::SO, 4};  // n_g = 6
    RnnParams p = make_rnn(g, 5, MixingMode::Identity, UpdateMap::Expm, rng);
    p.readout.log_tau.re(0, 0) = -1e308;  // exp underflows to exactly 0
    const ChannelSplit cs = channel_split(p, random_group_element(g, rng));
    REQUIRE(cs.predictive_dim == 0);
    REQUIRE(cs.memory_dim == g.algebra_dim());
    REQUIRE(fro_norm(cs.p_pred) == 0.0);
    REQUIRE(matrices_equal_bits(cs.p_mem, Matrix::identity(g.algebra_dim(), Field::Real)));
    for (double s : cs.sigma) REQUIRE(s == 0.0);
  }

  SECTION("enough generic prototypes see everything") {
    for (const SubgroupSpec g :
         {SubgroupSpec{SubgroupFamily::SO, 3}, SubgroupSpec{SubgroupFamily::U, 2},
          SubgroupSpec{SubgroupFamily::Torus, 4}}) {
      const int n = g.algebra_dim();
      RnnParams p = make_rnn(g, n + 3, MixingMode::Identity, UpdateMap::Expm, rng);
      const ChannelSplit cs = channel_split(p, random_group_element(g, rng));
      REQUIRE(cs.predictive_dim == n);
      REQUIRE(cs.memory_dim == 0);
      REQUIRE(fro_norm(sub(cs.p_pred, Matrix::identity(n, Field::Real))) < 1e-12);
    }
  }

  SECTION("a single prototype spans at most one direction") {
    const SubgroupSpec g{SubgroupFamily::SO, 4};
    RnnParams p = make_rnn(g, 1, MixingMode::Identity, UpdateMap::Expm, rng);
    const ChannelSplit cs = channel_split(p, random_group_element(g, rng));
    REQUIRE(cs.predictive_dim == 1);
    REQUIRE(cs.memory_dim == g.algebra_dim() - 1);
    // Rank-one projector: trace equals the dimension it spans.
    double tr = 0.0;
    for (int i = 0; i < g.algebra_dim(); ++i) tr += cs.p_pred.re(i, i);
    REQUIRE(tr == Catch::Approx(1.0).margin(1e-12));
  }

  SECTION("projectors are idempotent, symmetric, and complementary") {
    for (int vocab : {1, 3, 7, 12}) {
      const SubgroupSpec g{SubgroupFamily::U, 3};  // n_g = 9
      RnnParams p = make_rnn(g, vocab, MixingMode::Identity, UpdateMap::Expm, rng);
      const Matrix h = random_group_element(g, rng);
      const ChannelSplit cs = channel_split(p, h);
      REQUIRE(cs.predictive_dim + cs.memory_dim == g.algebra_dim());
      REQUIRE(cs.predictive_dim <= std::min(vocab, g.algebra_dim()));
      REQUIRE(idempotence_defect(cs.p_pred) < 1e-12);
      REQUIRE(idempotence_defect(cs.p_mem) < 1e-12);
      REQUIRE(symmetry_defect(cs.p_pred) < 1e-14);
      // Complement is exact by construction: P_pred + P_mem == I bitwise.
      REQUIRE(matrices_equal_bits(add(cs.p_pred, cs.p_mem),
                                  Matrix::identity(g.algebra_dim(), Field::Real)));
      // Projectors kill each other.
      REQUIRE(fro_norm(matmul(cs.p_pred, cs.p_mem)) < 1e-12);
    }
  }

  SECTION("singular values are sorted and the split tracks the cutoff") {
    const SubgroupSpec g{SubgroupFamily::SO, 4};
    RnnParams p = make_rnn(g, 9, MixingMode::Identity, UpdateMap::Expm, rng);
    const ChannelSplit cs = channel_split(p, random_group_element(g, rng));
    for (size_t k = 1; k < cs.sigma.size(); ++k) REQUIRE(cs.sigma[k - 1] >= cs.sigma[k]);
    int above = 0;
    for (double s : cs.sigma) {
      if (s > kChannelCutoffRel * cs.sigma.front()) ++above;
    }
    REQUIRE(above == cs.predictive_dim);
  }

  SECTION("off-group states are rejected") {
    const SubgroupSpec g{SubgroupFamily::SO, 3};
    RnnParams p = make_rnn(g, 4, MixingMode::Identity, UpdateMap::Expm, rng);
    Matrix bad = Matrix::identity(3, Field::Real);
    bad.re(0, 0) = 1.5;
    REQUIRE_THROWS_AS(channel_split(p, bad), InvalidInputError);
  }
}

TEST_CASE("trace runs observe without disturbing") {
  Rng rng(23);

  SECTION("recurrent trace: one record per position, faithful forward") {
    const SubgroupSpec g{SubgroupFamily::U, 3};
    RnnParams p = make_rnn(g, 5, MixingMode::LinearMix, UpdateMap::Expm, rng);
    const std::vector<int> tokens{0, 2, 4, 1, 3, 2, 0};
    const TraceRun tr = trace_run(p, tokens);
    REQUIRE(tr.records.size() == tokens.size());

    const ForwardResult plain = rnn_forward(p, tokens);
    REQUIRE(plain.logits.size() == tr.forward.logits.size());
    for (size_t t = 0; t < plain.logits.size(); ++t) {
      REQUIRE(matrices_equal_bits(plain.logits[t], tr.forward.logits[t]));
      REQUIRE(matrices_equal_bits(plain.states[t], tr.forward.states[t]));
    }

    const TraceRun again = trace_run(p, tokens);
    REQUIRE(again.records.size() == tr.records.size());
    for (size_t i = 0; i < tr.records.size(); ++i) {
      REQUIRE(again.records[i].u_norm == tr.records[i].u_norm);
      REQUIRE(again.records[i].drift == tr.records[i].drift);
      REQUIRE(again.records[i].coord_abs == tr.records[i].coord_abs);
    }

    for (const StepTrace& r : tr.records) {
      REQUIRE(r.layer == 0);
      REQUIRE(std::isfinite(r.u_norm));
      REQUIRE(r.u_norm >= 0.0);
      REQUIRE(r.attn_norm == 0.0);
      REQUIRE(r.ground_norm == 0.0);
      REQUIRE(r.coord_abs.size() == static_cast<size_t>(g.algebra_dim()));
      REQUIRE(r.coord_abs_max >= r.coord_abs_mean);
      REQUIRE(r.drift < 1e-12);
      // The coordinate activity accounts for the full tangent magnitude:
      // for u(d) the basis is orthonormal up to the (re,im) pairing.
      REQUIRE(r.coord_abs_max <= r.u_norm + 1e-15);
    }
  }

  SECTION("attention trace: T x L records with the update split") {
    const SubgroupSpec g{SubgroupFamily::SO, 4};
    FormerParams p = make_former(g, 6, 3, MixingMode::PerDirectionScale, MixingMode::LinearMix,
                                 UpdateMap::Expm, rng);
    const std::vector<int> tokens{1, 5, 0, 2, 4};
    const TraceRun tr = trace_run(p, tokens);
    REQUIRE(tr.records.size() == tokens.size() * p.layers.size());

    const ForwardResult plain = former_forward(p, tokens);
    for (size_t t = 0; t < plain.logits.size(); ++t) {
      REQUIRE(matrices_equal_bits(plain.logits[t], tr.forward.logits[t]));
      REQUIRE(matrices_equal_bits(plain.states[t], tr.forward.states[t]));
    }

    for (size_t i = 0; i < tr.records.size(); ++i) {
      const StepTrace& r = tr.records[i];
      REQUIRE(r.layer == static_cast<int>(i / tokens.size()));
      REQUIRE(r.pos == static_cast<int>(i % tokens.size()));
      REQUIRE(std::isfinite(r.u_norm));
      const double combined =
          std::sqrt(r.attn_norm * r.attn_norm + r.ground_norm * r.ground_norm);
      REQUIRE(r.u_norm == combined);
      REQUIRE(r.drift < 1e-12);
    }
  }

  SECTION("a state already at its token embedding is a fixed point") {
    const SubgroupSpec g{SubgroupFamily::SU, 2};
    FormerParams p = make_former(g, 4, 2, MixingMode::LinearMix, MixingMode::LinearMix,
                                 UpdateMap::Expm, rng);
    // Single position: attention is a point mass on itself, so Z projects
    // H^* H = I to zero, and grounding compares H to its own embedding.
    const TraceRun tr = trace_run(p, {2});
    REQUIRE(tr.records.size() == p.layers.size());
    for (const StepTrace& r : tr.records) {
      REQUIRE(r.u_norm < 1e-13);  // H^* H = I holds to roundoff only
      REQUIRE(r.attn_norm < 1e-13);
      REQUIRE(r.ground_norm < 1e-13);
      REQUIRE(r.coord_abs_max < 1e-13);
    }
    // The state never moves beyond roundoff.
    const TokenGroups tg = materialize_token_groups(p);
    REQUIRE(fro_norm(sub(tr.forward.states[0], tg.emb[2])) < 1e-12);
  }

  SECTION("constant-token recurrent stream records finite activity") {
    const SubgroupSpec g{SubgroupFamily::SO, 3};
    RnnParams p = make_rnn(g, 2, MixingMode::Identity, UpdateMap::Expm, rng);
    const TraceRun tr = trace_run(p, std::vector<int>(40, 1));
    for (const StepTrace& r : tr.records) {
      REQUIRE(std::isfinite(r.u_norm));
      REQUIRE(std::isfinite(r.coord_abs_mean));
      REQUIRE(r.u_norm >= 0.0);
    }
  }

  SECTION("stride down-samples positions") {
    const SubgroupSpec g{SubgroupFamily::SO, 3};
    RnnParams p = make_rnn(g, 3, MixingMode::Identity, UpdateMap::Expm, rng);
    const std::vector<int> tokens{0, 1, 2, 0, 1, 2, 0};
    REQUIRE(trace_run(p, tokens, 2).records.size() == 4);  // positions 0 2 4 6
    REQUIRE(trace_run(p, tokens, 3).records.size() == 3);  // positions 0 3 6
    REQUIRE(trace_run(p, tokens, 100).records.size() == 1);
    REQUIRE_THROWS_AS(trace_run(p, tokens, 0), InvalidInputError);

    FormerParams f = make_former(g, 3, 2, MixingMode::Identity, MixingMode::Identity,
                                 UpdateMap::Expm, rng);
    REQUIRE(trace_run(f, tokens, 2).records.size() == 8);  // 4 positions x 2 layers
  }
}

TEST_CASE("trace records serialize in the metrics style") {
  StepTrace r;
  r.pos = 4;
  r.layer = 1;
  r.u_norm = 0.5;
  r.attn_norm = 0.25;
  r.ground_norm = 0.125;
  r.coord_abs_max = 0.75;
  r.coord_abs_mean = 0.375;
  r.drift = 0.0;
  const std::string s = trace_line_json(r);
  REQUIRE(s.rfind("{\"pos\":4,\"layer\":1,\"u_norm\":0.5,\"attn_norm\":0.25,", 0) == 0);
  REQUIRE(s.find("\"ground_norm\":0.125") != std::string::npos);
  REQUIRE(s.find("\"drift\":0") != std::string::npos);
  REQUIRE(s.back() == '}');
}
