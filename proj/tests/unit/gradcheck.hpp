#pragma once

// Central finite-difference reference for layer and model gradients.

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "qpi/nn.hpp"
#include "qpi/rng.hpp"

namespace gradcheck {

struct Report {
  std::string name;
  double worst = 0.0;  // max |analytic - numeric| / max(1, |numeric|)
  std::size_t checked = 0;
};

inline double relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max(1.0, std::abs(numeric));
}

// Loss = sum(projection * output) on a fixed forward seed, so dropout masks
// are frozen across perturbations.
inline Report check_model(const std::string& name, qpi::nn::Model& model, const qpi::Tensor& input,
                          qpi::nn::Mode mode, std::uint64_t seed, double eps = 1e-5) {
  using namespace qpi;
  nn::ForwardOptions fo{mode, seed, 0};
  nn::Tape tape;
  const Tensor out = model.forward(input, fo, tape);
  Rng rng(seed ^ 0xabc);
  Tensor proj(out.shape());
  for (auto& v : proj.data()) v = rng.uniform(-1.0, 1.0);
  auto loss = [&](const Tensor& x) {
    const Tensor y = model.forward(x, fo);
    double s = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i) s += proj[i] * y[i];
    return s;
  };

  model.zero_grad();
  const Tensor grad_in = model.backward(tape, proj);
  Report rep{name, 0.0, 0};

  Tensor x = input;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double keep = x[i];
    x[i] = keep + eps;
    const double up = loss(x);
    x[i] = keep - eps;
    const double down = loss(x);
    x[i] = keep;
    rep.worst = std::max(rep.worst, relative_error(grad_in[i], (up - down) / (2 * eps)));
    ++rep.checked;
  }
  for (Tensor* p : model.parameters()) {
    for (std::size_t i = 0; i < p->size(); ++i) {
      const double keep = (*p)[i];
      (*p)[i] = keep + eps;
      const double up = loss(input);
      (*p)[i] = keep - eps;
      const double down = loss(input);
      (*p)[i] = keep;
      rep.worst = std::max(rep.worst, relative_error(p->grad()[i], (up - down) / (2 * eps)));
      ++rep.checked;
    }
  }
  return rep;
}

inline qpi::Tensor random_tensor(const qpi::Shape& shape, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  qpi::Rng rng(seed);
  qpi::Tensor t(shape);
  for (auto& v : t.data()) v = rng.uniform(lo, hi);
  return t;
}

// Values bounded away from zero so ReLU kinks stay out of the stencil.
inline qpi::Tensor away_from_zero(const qpi::Shape& shape, std::uint64_t seed) {
  qpi::Rng rng(seed);
  qpi::Tensor t(shape);
  for (auto& v : t.data()) {
    const double m = rng.uniform(0.05, 1.0);
    v = rng.bernoulli(0.5) ? m : -m;
  }
  return t;
}

// One report per layer kind plus a mixed stack with a cross-entropy head.
inline std::vector<Report> all_layer_reports(std::uint64_t seed) {
  using namespace qpi;
  using nn::LayerSpec;
  std::vector<Report> out;
  {
    nn::Model m({2, 6, 7}, {LayerSpec::conv2d(3, 3, 1, 1)});
    m.initialize(seed);
    for (Tensor* p : m.parameters())
      for (auto& v : p->data()) v += 0.1;
    out.push_back(check_model("conv2d", m, random_tensor({2, 2, 6, 7}, seed + 1), nn::Mode::eval, seed));
  }
  {
    nn::Model m({2, 7, 7}, {LayerSpec::conv2d(2, 3, 2, 0)});
    m.initialize(seed + 7);
    out.push_back(check_model("conv2d_strided", m, random_tensor({2, 2, 7, 7}, seed + 2), nn::Mode::eval, seed));
  }
  {
    nn::Model m({2, 6, 6}, {LayerSpec::maxpool2d(2, 2)});
    out.push_back(check_model("maxpool2d", m, random_tensor({2, 2, 6, 6}, seed + 3), nn::Mode::eval, seed));
  }
  {
    nn::Model m({2, 7, 7}, {LayerSpec::maxpool2d(3, 2)});
    out.push_back(check_model("maxpool2d_overlap", m, random_tensor({2, 2, 7, 7}, seed + 4), nn::Mode::eval, seed));
  }
  {
    nn::Model m({9}, {LayerSpec::fullyconnected(5)});
    m.initialize(seed + 11);
    out.push_back(check_model("fullyconnected", m, random_tensor({3, 9}, seed + 5), nn::Mode::eval, seed));
  }
  {
    nn::Model m({12}, {LayerSpec::relu()});
    out.push_back(check_model("relu", m, away_from_zero({3, 12}, seed + 6), nn::Mode::eval, seed));
  }
  {
    nn::Model m({12}, {LayerSpec::dropout(0.4)});
    out.push_back(check_model("dropout", m, random_tensor({3, 12}, seed + 7), nn::Mode::train, seed));
  }
  {
    nn::Model m({2, 3, 4}, {LayerSpec::flatten()});
    out.push_back(check_model("flatten", m, random_tensor({2, 2, 3, 4}, seed + 8), nn::Mode::eval, seed));
  }
  {
    nn::Model m({1, 10, 10}, {LayerSpec::conv2d(3, 3), LayerSpec::relu(), LayerSpec::maxpool2d(2, 2),
                              LayerSpec::flatten(), LayerSpec::fullyconnected(6), LayerSpec::relu(),
                              LayerSpec::dropout(0.3), LayerSpec::fullyconnected(4)});
    m.initialize(seed + 13);
    const Tensor x = random_tensor({2, 1, 10, 10}, seed + 9);
    const int labels[] = {1, 3};
    nn::ForwardOptions fo{nn::Mode::train, seed, 0};
    nn::Tape tape;
    const Tensor logits = m.forward(x, fo, tape);
    m.zero_grad();
    const Tensor gx = m.backward(tape, nn::cross_entropy_logit_grad(logits, labels));
    auto loss = [&]() { return nn::cross_entropy(nn::softmax(m.forward(x, fo)), labels).loss; };
    Report rep{"stack_cross_entropy", 0.0, 0};
    const double eps = 1e-5;
    for (Tensor* p : m.parameters()) {
      for (std::size_t i = 0; i < p->size(); ++i) {
        const double keep = (*p)[i];
        (*p)[i] = keep + eps;
        const double up = loss();
        (*p)[i] = keep - eps;
        const double down = loss();
        (*p)[i] = keep;
        rep.worst = std::max(rep.worst, relative_error(p->grad()[i], (up - down) / (2 * eps)));
        ++rep.checked;
      }
    }
    (void)gx;
    out.push_back(rep);
  }
  return out;
}

}  // namespace gradcheck
