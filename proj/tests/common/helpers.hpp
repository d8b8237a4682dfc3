#pragma once

#include <filesystem>
#include <functional>
#include <map>
#include <random>
#include <string>

#include "brain3d/model.hpp"
#include "brain3d/synthdata.hpp"

namespace brain3d::testing {

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    std::random_device rd;
    path_ = std::filesystem::temp_directory_path() / ("brain3d_" + tag + "_" + std::to_string(rd()));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

/// Tiny model geometry for fast tests: 8^3 volume, 8 tokens, K = 4.
inline ModelConfig tiny_config() {
  ModelConfig c;
  c.encoder.volume_dims = {8, 8, 8};
  c.encoder.patch = {4, 4, 4};
  c.encoder.width = 8;
  c.encoder.layers = 1;
  c.encoder.heads = 2;
  c.encoder.mlp_ratio = 2;
  c.bridge.tokens = 4;
  c.lm.width = 8;
  c.lm.layers = 1;
  c.lm.heads = 2;
  c.lm.mlp_ratio = 2;
  c.lm.max_positions = 64;
  c.lora.rank = 2;
  c.lora.alpha = 4.0;
  return c;
}

inline Vocabulary tiny_vocab() {
  std::vector<std::string> corpus{std::string(kCanonicalPrompt), "left frontal edema .", "right temporal necrosis .",
                                  "no abnormality detected ."};
  return Vocabulary::build(corpus);
}

inline Volume random_volume(Dims dims, std::mt19937_64& rng) {
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  Volume v(dims);
  for (auto& x : v.voxels) x = u(rng);
  return v;
}

using LossFn = std::function<ag::Var(Binder<double>&)>;

/// Worst relative error ||analytic - numeric|| / max(||analytic||, ||numeric||)
/// over the named parameters, central differences with step h.
inline double gradcheck(ParamStore<double>& store, const std::vector<std::string>& names, const LossFn& loss,
                        double h = 1e-6) {
  std::map<std::string, Matrix<double>> analytic;
  {
    ag::Tape<double> tape;
    Binder<double> p(tape, store, [](const std::string&) { return true; });
    tape.backward(loss(p));
    p.accumulate(analytic);
  }
  auto value = [&] {
    ag::Tape<double> tape;
    Binder<double> p(tape, store);
    return tape.value(loss(p))(0, 0);
  };
  double worst = 0.0;
  for (const auto& name : names) {
    Matrix<double>& w = store.get(name);
    Matrix<double> numeric(w.rows(), w.cols());
    for (Eigen::Index i = 0; i < w.size(); ++i) {
      const double keep = w.data()[i];
      w.data()[i] = keep + h;
      const double up = value();
      w.data()[i] = keep - h;
      const double down = value();
      w.data()[i] = keep;
      numeric.data()[i] = (up - down) / (2 * h);
    }
    const Matrix<double> a = analytic.count(name) ? analytic.at(name) : Matrix<double>::Zero(w.rows(), w.cols());
    const double scale = std::max({a.norm(), numeric.norm(), 1e-12});
    worst = std::max(worst, (a - numeric).norm() / scale);
  }
  return worst;
}

}  // namespace brain3d::testing
