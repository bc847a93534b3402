#include "wfs/quality.hpp"

namespace wfs {

double mean_ssim(const std::vector<Field>& pred, const std::vector<Field>& truth,
                 const SsimConfig& cfg) {
  if (pred.empty()) throw Error(Errc::invalid_argument, "mean_ssim: empty sets");
  if (pred.size() != truth.size())
    throw Error(Errc::invalid_argument, "mean_ssim: set sizes differ");
  double sum = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) sum += ssim(pred[i], truth[i], cfg);
  return sum / double(pred.size());
}

}  // namespace wfs
