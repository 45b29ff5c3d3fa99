#include <cmath>
#include <numeric>

#include "doctest.h"
#include "fgl/error.hpp"
#include "fgl/model.hpp"

using namespace fgl;

namespace {

TransformerConfig tiny_config() {
  TransformerConfig c;
  c.num_layers = 1;
  c.num_heads = 2;
  c.d_model = 8;
  c.d_ff = 16;
  c.dropout_rate = 0.0;
  c.vocab_size = 12;
  c.max_positions = 16;
  return c;
}

std::vector<SequencePair> tiny_pairs() {
  return {
      {{6, 7, 8, Vocabulary::eou(), 9}, {Vocabulary::bos(), 10, 7, Vocabulary::eos()}, Origin::Target},
      {{9, 6}, {Vocabulary::bos(), 8, Vocabulary::eos()}, Origin::Target},
      {{11, 10, 9, 8, 7, 6, 6}, {Vocabulary::bos(), 6, 6, 9, 10, Vocabulary::eos()}, Origin::Pretrain},
  };
}

double batch_loss(const ModelParameters<double>& p, const TransformerConfig& c, const Batch& b) {
  const auto logits = forward<double>(p, c, b, Mode::Eval, nullptr);
  const auto [labels, mask] = shifted_labels(b);
  return nll_loss(logits, labels, mask).mean;
}

}  // namespace

TEST_CASE("init_parameters is deterministic and validates the config") {
  auto c = tiny_config();
  Rng a(7), b(7);
  CHECK(init_parameters<float>(c, a) == init_parameters<float>(c, b));
  c.num_heads = 3;
  Rng r(1);
  CHECK_THROWS_AS(init_parameters<float>(c, r), Error);
}

TEST_CASE("init variance matches the uniform bound") {
  TransformerConfig c;
  c.vocab_size = 50;
  Rng rng(3);
  const auto p = init_parameters<double>(c, rng);
  const auto& w = p.at("encoder.0.ffn.fc1.weight");  // 64 x 256
  const double bound = 1.0 / std::sqrt(64.0);
  double mean = std::accumulate(w.values.begin(), w.values.end(), 0.0) / static_cast<double>(w.values.size());
  double var = 0;
  for (double v : w.values) var += (v - mean) * (v - mean);
  var /= static_cast<double>(w.values.size());
  CHECK(std::abs(var - bound * bound / 3.0) < 0.1 * bound * bound / 3.0);
}

TEST_CASE("analytic gradients match central differences") {
  const auto c = tiny_config();
  Rng rng(11);
  auto params = init_parameters<double>(c, rng);
  // non-trivial norm gains and biases
  for (auto& [name, t] : params.tensors) {
    if (t.shape.size() == 1) {
      for (auto& v : t.values) v += 0.2 * (rng.uniform() - 0.5);
    }
  }
  const auto pairs = tiny_pairs();
  const Batch batch = make_batch(pairs, 0, pairs.size());
  const auto analytic = backward<double>(params, c, batch, nullptr, Mode::Eval);

  const double h = 1e-4;
  double worst = 0;
  std::string worst_name;
  for (auto& [name, t] : params.tensors) {
    const auto& g = analytic.grads.at(name);
    for (std::size_t i = 0; i < t.values.size(); ++i) {
      const double orig = t.values[i];
      t.values[i] = orig + h;
      const double up = batch_loss(params, c, batch);
      t.values[i] = orig - h;
      const double down = batch_loss(params, c, batch);
      t.values[i] = orig;
      const double numeric = (up - down) / (2 * h);
      const double a = g.values[i];
      const double err = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-6});
      if (err > worst) {
        worst = err;
        worst_name = name;
      }
    }
  }
  INFO("worst block: " << worst_name);
  CHECK(worst < 1e-3);
}
