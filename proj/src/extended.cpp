// Compiled only into the long double build (see CMakeLists.txt), where the
// core namespace is renamed so both builds link into one binary.
#include "extended.hpp"

#include "kinfuse/encoder.hpp"

namespace kinfuse_ext {

using namespace kinfuse;

struct ExtendedLoss::Impl {
  Model model;
  std::vector<EncodedExample> batch;
  std::optional<std::uint64_t> dropout_seed;

  Real loss() const {
    std::optional<Rng> rng;
    if (dropout_seed) rng.emplace(*dropout_seed);
    return model.loss(batch, rng ? &*rng : nullptr);
  }
};

ExtendedLoss::ExtendedLoss(const std::string& checkpoint, const std::vector<PlainExample>& batch,
                           std::optional<std::uint64_t> dropout_seed)
    : impl_(new Impl{checkpoint_from_string(checkpoint), {}, dropout_seed}) {
  for (const PlainExample& p : batch) {
    EncodedExample ex;
    ex.pair.ids = p.ids;
    ex.pair.lemmas_a = p.lemmas_a;
    ex.pair.lemmas_b = p.lemmas_b;
    ex.pair.label = p.label;
    ex.indicators = Matrix(p.lemmas_a.size(), p.lemmas_b.size(),
                           std::vector<Real>(p.indicators.begin(), p.indicators.end()));
    ex.label = p.label;
    impl_->batch.push_back(std::move(ex));
  }
}

ExtendedLoss::~ExtendedLoss() = default;

long double ExtendedLoss::central_difference(std::size_t id, std::size_t index, double eps) {
  Matrix& value = impl_->model.params().value(id);
  const Real saved = value[index];
  value[index] = saved + eps;
  const Real plus = impl_->loss();
  value[index] = saved - eps;
  const Real minus = impl_->loss();
  value[index] = saved;
  return (plus - minus) / (2 * static_cast<Real>(eps));
}

}  // namespace kinfuse_ext
