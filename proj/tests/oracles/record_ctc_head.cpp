// Records tests/data/ctc_head_golden.json, the regression snapshot replayed by
// test_model. Rebuild and rerun only when a forward-pass change is intended:
//   g++ -std=c++20 -O2 -Iinclude -Ivendor -I/usr/include/eigen3 tests/oracles/record_ctc_head.cpp -o /tmp/rec
//   /tmp/rec > tests/data/ctc_head_golden.json

#include <iostream>

#include "decred/model.hpp"

int main() {
  decred::ModelConfig c;
  c.feat_dim = 8;
  c.conv_channels = 3;
  c.encoder_layers = 2;
  c.decoder_layers = 4;
  c.d_model = 16;
  c.d_ff = 32;
  c.heads = 2;
  c.vocab_size = 11;
  c.taps = {2, 4};
  const std::uint64_t seed = 21, feature_seed = 31;
  const int frames = 20;
  decred::Model<float> m(c, seed);
  decred::Rng rng(feature_seed);
  decred::Features f(frames, c.feat_dim);
  for (Eigen::Index i = 0; i < f.size(); ++i) f.data()[i] = static_cast<float>(rng.normal());
  const auto lp = m.ctc_log_probs(m.encode(f));
  nlohmann::json rows = nlohmann::json::array();
  for (Eigen::Index t = 0; t < lp.rows(); ++t) {
    std::vector<double> row;
    for (Eigen::Index k = 0; k < lp.cols(); ++k) row.push_back(lp(t, k));
    rows.push_back(row);
  }
  nlohmann::json out{{"config", c}, {"seed", seed}, {"feature_seed", feature_seed}, {"frames", frames}, {"log_probs", rows}};
  std::cout << out.dump(1) << '\n';
}
