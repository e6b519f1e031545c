#include "promptmatte/params.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "promptmatte/errors.hpp"

namespace pmatte {

template <typename T>
Tensor<T>& ParamStore<T>::add(const std::string& path, Tensor<T> value) {
  if (path.empty()) throw ArgumentError("parameter path must not be empty");
  if (tensors_.count(path)) throw ArgumentError("duplicate parameter path " + path);
  value.set_requires_grad(true);
  return tensors_.emplace(path, std::move(value)).first->second;
}

template <typename T>
const Tensor<T>& ParamStore<T>::get(const std::string& path) const {
  auto it = tensors_.find(path);
  if (it == tensors_.end()) throw ArgumentError("no parameter named " + path);
  return it->second;
}

template <typename T>
Tensor<T>& ParamStore<T>::get_mut(const std::string& path) {
  auto it = tensors_.find(path);
  if (it == tensors_.end()) throw ArgumentError("no parameter named " + path);
  return it->second;
}

template <typename T>
std::vector<std::string> ParamStore<T>::paths() const {
  std::vector<std::string> out;
  out.reserve(tensors_.size());
  for (const auto& [k, v] : tensors_) out.push_back(k);
  return out;
}

template <typename T>
void ParamStore<T>::zero_grad() {
  for (auto& [k, v] : tensors_) v.zero_grad();
}

template <typename T>
void ParamStore<T>::assign_from(const ParamStore& other) {
  for (auto& [k, v] : tensors_) {
    const Tensor<T>& src = other.get(k);
    if (src.shape() != v.shape()) throw DimensionError("shape mismatch for parameter " + k);
    auto dst = v.data_mut();
    std::copy(src.data().begin(), src.data().end(), dst.begin());
  }
}

template <typename T>
std::size_t param_count(const ParamStore<T>& store) {
  std::size_t n = 0;
  for (const auto& [k, v] : store.tensors()) n += v.numel();
  return n;
}

template <typename T>
Tensor<T> init_uniform(Shape shape, std::size_t fan_in, Rng& rng) {
  if (fan_in == 0) throw ArgumentError("init_uniform: fan_in must be positive");
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  std::uniform_real_distribution<double> dist(-bound, bound);
  Tensor<T> t(std::move(shape));
  for (T& v : t.data_mut()) v = static_cast<T>(dist(rng));
  return t;
}

template <typename T>
Tensor<T> init_zeros(Shape shape) {
  return Tensor<T>(std::move(shape), T(0));
}

template <typename T>
Tensor<T> init_ones(Shape shape) {
  return Tensor<T>(std::move(shape), T(1));
}

template <typename T>
void save_params(const ParamStore<T>& store, const std::string& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  std::ofstream manifest(fs::path(dir) / "manifest.txt");
  if (!manifest) throw IoError("cannot write manifest in " + dir);
  for (const auto& [path, t] : store.tensors()) {
    save_pmt((fs::path(dir) / (path + ".pmt")).string(), t);
    manifest << path << ' ' << (dtype_of<T>() == DType::kFloat32 ? "f32" : "f64");
    for (std::size_t e : t.shape()) manifest << ' ' << e;
    manifest << '\n';
  }
}

template <typename T>
void load_params(ParamStore<T>& store, const std::string& dir) {
  namespace fs = std::filesystem;
  std::ifstream manifest(fs::path(dir) / "manifest.txt");
  if (!manifest) throw IoError("no manifest.txt in " + dir);
  std::size_t listed = 0;
  std::string line;
  while (std::getline(manifest, line)) {
    std::istringstream ls(line);
    std::string path;
    if (!(ls >> path)) continue;
    ++listed;
    if (!store.contains(path)) throw IoError("checkpoint parameter " + path + " is not part of the model");
    Tensor<T> loaded = load_pmt<T>((fs::path(dir) / (path + ".pmt")).string());
    Tensor<T>& dst = store.get_mut(path);
    if (loaded.shape() != dst.shape()) {
      throw IoError("checkpoint shape " + shape_str(loaded.shape()) + " for " + path +
                    " does not match model shape " + shape_str(dst.shape()));
    }
    auto out = dst.data_mut();
    std::copy(loaded.data().begin(), loaded.data().end(), out.begin());
  }
  if (listed != store.size()) {
    throw IoError("checkpoint lists " + std::to_string(listed) + " parameters, model has " +
                  std::to_string(store.size()));
  }
}

template class ParamStore<float>;
template class ParamStore<double>;

#define PMATTE_INSTANTIATE(T)                                               \
  template std::size_t param_count<T>(const ParamStore<T>&);                \
  template Tensor<T> init_uniform<T>(Shape, std::size_t, Rng&);             \
  template Tensor<T> init_zeros<T>(Shape);                                  \
  template Tensor<T> init_ones<T>(Shape);                                   \
  template void save_params<T>(const ParamStore<T>&, const std::string&);   \
  template void load_params<T>(ParamStore<T>&, const std::string&);

PMATTE_INSTANTIATE(float)
PMATTE_INSTANTIATE(double)
#undef PMATTE_INSTANTIATE

}  // namespace pmatte
