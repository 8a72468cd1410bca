#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <set>
#include <sstream>
#include <vector>

#include <boost/math/distributions/chi_squared.hpp>

#include "mlcl/losses.hpp"
#include "mlcl/optim.hpp"
#include "mlcl/rehearsal.hpp"
#include "mlcl/vit.hpp"

using namespace mlcl;

namespace {

using DT = Tensor<double>;

BufferEntry<double> tiny_entry(std::int64_t index, int positive_class = 0, int num_classes = 4) {
  BufferEntry<double> e;
  e.sample = {0.5, 0.25};
  e.label.assign(static_cast<std::size_t>(num_classes), 0.0);
  e.label[static_cast<std::size_t>(positive_class)] = 1.0;
  e.logits.assign(static_cast<std::size_t>(num_classes), 0.0);
  e.stream_index = index;
  e.task_id = 0;
  return e;
}

ViTConfig micro_config() {
  ViTConfig c;
  c.image_size = 4;
  c.patch_size = 2;
  c.channels = 3;
  c.embed_dim = 8;
  c.num_blocks = 2;
  c.num_heads = 2;
  c.mlp_ratio = 2;
  c.total_classes = 3;
  return c;
}

}  // namespace

TEST_CASE("reservoir: fill phase retains the first B items in order") {
  ReplayBuffer<double> buf(5);
  Rng rng(1);
  for (int i = 0; i < 5; ++i) buf.insert(tiny_entry(i), rng);
  REQUIRE(buf.size() == 5);
  CHECK(buf.seen_count() == 5);
  for (int i = 0; i < 5; ++i) CHECK(buf.entry(static_cast<std::size_t>(i)).stream_index == i);
}

TEST_CASE("reservoir: capacity is never exceeded and seen count is monotone") {
  ReplayBuffer<double> buf(5);
  Rng rng(2);
  std::int64_t prev_seen = 0;
  for (int i = 0; i < 200; ++i) {
    buf.insert(tiny_entry(i), rng);
    CHECK(buf.size() <= 5);
    CHECK(buf.seen_count() == prev_seen + 1);
    prev_seen = buf.seen_count();
  }
  CHECK(buf.size() == 5);
  CHECK(buf.seen_count() == 200);
}

TEST_CASE("reservoir: item at n=B is retained with probability B/(B+1)") {
  const int kB = 4;
  const int kTrials = 20000;
  Rng rng(3);
  int retained = 0;
  for (int t = 0; t < kTrials; ++t) {
    ReplayBuffer<double> buf(kB);
    for (int i = 0; i < kB; ++i) buf.insert(tiny_entry(i), rng);
    buf.insert(tiny_entry(kB), rng);
    for (std::size_t s = 0; s < buf.size(); ++s) {
      if (buf.entry(s).stream_index == kB) {
        ++retained;
        break;
      }
    }
  }
  const double p = 4.0 / 5.0;
  const double sigma = std::sqrt(p * (1.0 - p) / kTrials);
  const double rate = static_cast<double>(retained) / kTrials;
  CHECK(std::abs(rate - p) < 3.0 * sigma);
}

TEST_CASE("reservoir: uniform inclusion across a long stream (Monte Carlo)") {
  // B=100, n=10,000, 2,000 seeded trials. Every item's inclusion indicator is
  // Binomial(trials, B/n), so ~0.27% of the 10,000 items are expected to land
  // outside the 3-sigma band even for a correct sampler; the check asserts the
  // 3-sigma coverage property (>= 99.5% of items inside) plus a hard 5-sigma
  // outlier bound, which any systematic bias violates immediately.
  const int kB = 100;
  const int kN = 10000;
  const int kTrials = 2000;
  std::vector<int> counts(kN, 0);
  Rng rng(20240607);
  for (int t = 0; t < kTrials; ++t) {
    ReplayBuffer<double> buf(kB);
    BufferEntry<double> e;
    e.label = {1.0};
    e.logits = {0.0};
    for (int i = 0; i < kN; ++i) {
      e.stream_index = i;
      buf.insert(e, rng);
    }
    for (std::size_t s = 0; s < buf.size(); ++s) {
      ++counts[static_cast<std::size_t>(buf.entry(s).stream_index)];
    }
  }
  const double p = static_cast<double>(kB) / kN;
  const double sigma = std::sqrt(p * (1.0 - p) / kTrials);
  long total = 0;
  int within3 = 0;
  double max_z = 0.0;
  for (int c : counts) {
    total += c;
    const double z = std::abs(c / static_cast<double>(kTrials) - p) / sigma;
    if (z <= 3.0) ++within3;
    max_z = std::max(max_z, z);
  }
  CHECK(total == static_cast<long>(kTrials) * kB);  // exactly B kept per trial
  CHECK(static_cast<double>(within3) / kN >= 0.995);
  CHECK(max_z <= 5.0);
}

TEST_CASE("reservoir: buffer label marginals match the stream distribution") {
  // Six one-hot classes with probabilities proportional to 1..6; the buffer
  // marginals after a long stream must pass a chi-square test against the
  // stream distribution (p > 0.01) for every probed seed.
  const int kClasses = 6;
  const int kB = 300;
  const int kN = 30000;
  std::vector<double> probs(kClasses);
  for (int c = 0; c < kClasses; ++c) probs[static_cast<std::size_t>(c)] = (c + 1) / 21.0;

  boost::math::chi_squared dist(kClasses - 1);
  for (std::uint64_t seed : {11u, 12u, 13u}) {
    Rng label_rng(Rng::derive(seed, "labels"));
    Rng reservoir_rng(Rng::derive(seed, "reservoir"));
    ReplayBuffer<double> buf(kB);
    for (int i = 0; i < kN; ++i) {
      double u = label_rng.uniform();
      int cls = kClasses - 1;
      double acc = 0.0;
      for (int c = 0; c < kClasses; ++c) {
        acc += probs[static_cast<std::size_t>(c)];
        if (u < acc) {
          cls = c;
          break;
        }
      }
      buf.insert(tiny_entry(i, cls, kClasses), reservoir_rng);
    }
    std::vector<double> observed(kClasses, 0.0);
    for (std::size_t s = 0; s < buf.size(); ++s) {
      const auto& label = buf.entry(s).label;
      for (int c = 0; c < kClasses; ++c) {
        observed[static_cast<std::size_t>(c)] += label[static_cast<std::size_t>(c)];
      }
    }
    double stat = 0.0;
    for (int c = 0; c < kClasses; ++c) {
      const double expected = kB * probs[static_cast<std::size_t>(c)];
      const double d = observed[static_cast<std::size_t>(c)] - expected;
      stat += d * d / expected;
    }
    const double p_value = 1.0 - boost::math::cdf(dist, stat);
    INFO("seed " << seed << " chi2 " << stat << " p " << p_value);
    CHECK(p_value > 0.01);
  }
}

TEST_CASE("sample_batch: k equal to size is a permutation of the buffer") {
  ReplayBuffer<double> buf(6);
  Rng rng(4);
  for (int i = 0; i < 6; ++i) buf.insert(tiny_entry(i), rng);
  auto batch = buf.sample_batch(6, rng);
  REQUIRE(batch.size() == 6);
  std::set<std::int64_t> seen;
  for (const auto* e : batch) seen.insert(e->stream_index);
  CHECK(seen == std::set<std::int64_t>{0, 1, 2, 3, 4, 5});
}

TEST_CASE("sample_batch: without replacement below size, with replacement above") {
  ReplayBuffer<double> buf(4);
  Rng rng(5);
  for (int i = 0; i < 4; ++i) buf.insert(tiny_entry(i), rng);

  auto small = buf.sample_batch(3, rng);
  REQUIRE(small.size() == 3);
  std::set<const BufferEntry<double>*> distinct(small.begin(), small.end());
  CHECK(distinct.size() == 3);

  auto big = buf.sample_batch(9, rng);
  CHECK(big.size() == 9);  // only possible with replacement
}

TEST_CASE("sample_batch: deterministic under a fixed seed, empty when buffer is empty") {
  ReplayBuffer<double> buf(8);
  Rng fill(6);
  for (int i = 0; i < 8; ++i) buf.insert(tiny_entry(i), fill);

  Rng a(99), b(99);
  auto batch_a = buf.sample_batch(5, a);
  auto batch_b = buf.sample_batch(5, b);
  REQUIRE(batch_a.size() == batch_b.size());
  for (std::size_t i = 0; i < batch_a.size(); ++i) {
    CHECK(batch_a[i]->stream_index == batch_b[i]->stream_index);
  }

  ReplayBuffer<double> empty_buf(8);
  Rng c(100);
  CHECK(empty_buf.sample_batch(4, c).empty());
  CHECK(buf.sample_batch(0, c).empty());
}

TEST_CASE("insert: malformed entries and zero capacity are rejected") {
  CHECK_THROWS_AS(ReplayBuffer<double>(0), std::invalid_argument);
  ReplayBuffer<double> buf(2);
  Rng rng(7);
  BufferEntry<double> fractional = tiny_entry(0);
  fractional.label[1] = 0.5;
  CHECK_THROWS_AS(buf.insert(fractional, rng), std::invalid_argument);
  BufferEntry<double> ragged = tiny_entry(0);
  ragged.logits.pop_back();
  CHECK_THROWS_AS(buf.insert(ragged, rng), std::invalid_argument);
  CHECK(buf.seen_count() == 0);
}

TEST_CASE("ace_class_mask: stream positives, buffer seen set, empty batch") {
  DT labels = DT::zeros({2, 10});
  labels.values_mut()[3] = 1.0;                // row 0, class 3
  labels.values_mut()[10 + 7] = 1.0;           // row 1, class 7
  DT stream_mask = ace_class_mask(labels, {0, 1, 2}, 10, AceSource::kStream);
  for (int c = 0; c < 10; ++c) {
    const double expected = (c == 3 || c == 7) ? 1.0 : 0.0;
    CHECK(stream_mask.values()[static_cast<std::size_t>(c)] == expected);
  }

  DT buffer_mask = ace_class_mask(labels, {0, 2, 5}, 10, AceSource::kBuffer);
  for (int c = 0; c < 10; ++c) {
    const double expected = (c == 0 || c == 2 || c == 5) ? 1.0 : 0.0;
    CHECK(buffer_mask.values()[static_cast<std::size_t>(c)] == expected);
  }

  DT no_positives = DT::zeros({2, 10});
  DT zero_mask = ace_class_mask(no_positives, {0, 1}, 10, AceSource::kStream);
  double mask_sum = 0.0;
  for (double v : zero_mask.values()) mask_sum += v;
  CHECK(mask_sum == 0.0);
  // An all-zero class mask silences the classification loss entirely.
  DT logits = DT::zeros({2, 10});
  auto silenced = bce_with_logits(logits, no_positives, &zero_mask);
  CHECK(silenced.all_masked);
  CHECK(silenced.loss.item() == 0.0);
}

TEST_CASE("loss_er: zero logits with one positive among seen classes give ln 2") {
  std::vector<BufferEntry<double>> store = {tiny_entry(0, 1), tiny_entry(1, 2)};
  std::vector<const BufferEntry<double>*> entries{&store[0], &store[1]};
  DT logits = DT::zeros({2, 4});
  DT loss = loss_er_from_logits(logits, entries, {0, 1, 2, 3});
  CHECK(loss.item() == doctest::Approx(0.6931471805599453).epsilon(1e-12));

  // Saturated correct logits drive the loss to ~0.
  DT confident = DT::full({2, 4}, -40.0);
  confident.values_mut()[1] = 40.0;      // entry 0 positive at class 1
  confident.values_mut()[4 + 2] = 40.0;  // entry 1 positive at class 2
  DT near_zero = loss_er_from_logits(confident, entries, {0, 1, 2, 3});
  CHECK(near_zero.item() < 1e-12);

  // The mask restricts the mean to seen classes only: with seen = {1},
  // entry 0 contributes ln 2 at its positive and entry 1 contributes ln 2 at
  // a negative, still ln 2 overall for zero logits.
  DT masked = loss_er_from_logits(logits, entries, {1});
  CHECK(masked.item() == doctest::Approx(0.6931471805599453).epsilon(1e-12));

  CHECK(loss_er_from_logits(logits, {}, {0}).item() == 0.0);
}

TEST_CASE("loss_der: constant offset and empty boundary") {
  std::vector<BufferEntry<double>> store = {tiny_entry(0, 0), tiny_entry(1, 3)};
  store[0].logits = {0.5, -1.0, 2.0, 0.0};
  store[1].logits = {1.0, 1.0, -2.0, 0.25};
  std::vector<const BufferEntry<double>*> entries{&store[0], &store[1]};

  DT current = batch_logit_rows(entries);
  CHECK(loss_der_from_logits(current, entries).item() == 0.0);

  DT shifted = current.clone_values();
  for (auto& v : shifted.values_mut()) v += 1.0;
  CHECK(loss_der_from_logits(shifted, entries).item() == doctest::Approx(1.0).epsilon(1e-12));

  CHECK(loss_der_from_logits(current, {}).item() == 0.0);
}

TEST_CASE("loss_der: zero immediately after insertion with a real model") {
  ViTConfig c = micro_config();
  Vit<float> model(c, 51);
  Rng rng(52);
  Tensor<float> imgs = Tensor<float>::zeros({2, c.image_dim()});
  for (auto& v : imgs.values_mut()) v = static_cast<float>(rng.uniform());

  // Insert with eval-mode logits, exactly as the training loop does.
  Tensor<float> eval_logits = model.logits_eval(imgs);
  ReplayBuffer<float> buf(4);
  Rng res_rng(53);
  for (int i = 0; i < 2; ++i) {
    BufferEntry<float> e;
    e.sample.assign(imgs.values().begin() + i * c.image_dim(),
                    imgs.values().begin() + (i + 1) * c.image_dim());
    e.label.assign(static_cast<std::size_t>(c.total_classes), 0.0f);
    e.label[0] = 1.0f;
    e.logits.assign(eval_logits.values().begin() + i * c.total_classes,
                    eval_logits.values().begin() + (i + 1) * c.total_classes);
    e.stream_index = i;
    buf.insert(std::move(e), res_rng);
  }
  Rng sample_rng(54);
  auto batch = buf.sample_batch(2, sample_rng);
  // Train-mode forward with zero drop-path produces bitwise-identical values.
  Tensor<float> der = loss_der(model, batch, true, nullptr);
  CHECK(der.item() == 0.0f);

  // After an optimizer step the stored logits are stale and the loss moves.
  Tensor<float> clf =
      bce_with_logits(model.forward(imgs, false, true).logits, batch_label_rows(batch)).loss;
  clf.backward();
  auto params = model.parameters();
  sgd_step(params, 0.05);
  Tensor<float> der_after = loss_der(model, batch, true, nullptr);
  CHECK(der_after.item() > 0.0f);
  // Stored entries were not mutated by training (match rows by stream index;
  // the sampled batch order is random).
  for (const auto* e : batch) {
    REQUIRE(e->logits.size() == static_cast<std::size_t>(c.total_classes));
    const auto row = static_cast<std::size_t>(e->stream_index) *
                     static_cast<std::size_t>(c.total_classes);
    for (int k = 0; k < c.total_classes; ++k) {
      CHECK(e->logits[static_cast<std::size_t>(k)] ==
            eval_logits.values()[row + static_cast<std::size_t>(k)]);
    }
  }
}

TEST_CASE("snapshot: save/load round-trips bytes and resumes bit-exactly") {
  ReplayBuffer<double> buf(3);
  Rng rng(55);
  for (int i = 0; i < 10; ++i) {
    BufferEntry<double> e = tiny_entry(i, i % 4);
    e.masks.bits = {{1.0, 0.0, 1.0}, {0.0, 1.0, 1.0}};
    e.task_id = i / 5;
    buf.insert(std::move(e), rng);
  }

  std::ostringstream first;
  buf.save(first, rng);

  std::istringstream in(first.str());
  Rng restored_rng(0);
  auto restored = ReplayBuffer<double>::load(in, restored_rng);
  CHECK(restored.capacity() == 3);
  CHECK(restored.seen_count() == 10);
  REQUIRE(restored.size() == buf.size());
  for (std::size_t i = 0; i < buf.size(); ++i) {
    CHECK(restored.entry(i).stream_index == buf.entry(i).stream_index);
    CHECK(restored.entry(i).label == buf.entry(i).label);
    CHECK(restored.entry(i).masks.bits == buf.entry(i).masks.bits);
    CHECK(restored.entry(i).task_id == buf.entry(i).task_id);
  }

  std::ostringstream second;
  restored.save(second, restored_rng);
  CHECK(second.str() == first.str());

  // Continuing both buffers with their restored rng states stays identical.
  for (int i = 10; i < 40; ++i) {
    buf.insert(tiny_entry(i, i % 4), rng);
    restored.insert(tiny_entry(i, i % 4), restored_rng);
  }
  for (std::size_t i = 0; i < buf.size(); ++i) {
    CHECK(buf.entry(i).stream_index == restored.entry(i).stream_index);
  }
}

TEST_CASE("snapshot: corrupted headers are rejected") {
  ReplayBuffer<double> buf(2);
  Rng rng(56);
  buf.insert(tiny_entry(0), rng);
  std::ostringstream os;
  buf.save(os, rng);
  std::string bytes = os.str();
  bytes[0] = 'X';
  std::istringstream bad(bytes);
  Rng r2(0);
  CHECK_THROWS_AS(ReplayBuffer<double>::load(bad, r2), std::runtime_error);

  std::istringstream truncated(os.str().substr(0, 12));
  CHECK_THROWS_AS(ReplayBuffer<double>::load(truncated, r2), std::runtime_error);
}
