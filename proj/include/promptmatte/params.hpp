#pragma once

// Named parameter tensors. Paths are dot-separated ("unet.mid.attn.wq") and
// iteration follows lexicographic path order, which fixes the order of
// optimizer updates and serialized files.

#include <cstddef>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "promptmatte/tensor.hpp"

namespace pmatte {

using Rng = std::mt19937_64;

template <typename T>
class ParamStore {
 public:
  // Registers a trainable leaf; duplicate paths raise ArgumentError.
  Tensor<T>& add(const std::string& path, Tensor<T> value);
  const Tensor<T>& get(const std::string& path) const;
  Tensor<T>& get_mut(const std::string& path);
  bool contains(const std::string& path) const { return tensors_.count(path) != 0; }

  std::size_t size() const { return tensors_.size(); }
  std::vector<std::string> paths() const;
  const std::map<std::string, Tensor<T>>& tensors() const { return tensors_; }
  std::map<std::string, Tensor<T>>& tensors_mut() { return tensors_; }

  void zero_grad();

  // Copies the values of every path present in both stores; missing or
  // mis-shaped entries raise.
  void assign_from(const ParamStore& other);

 private:
  std::map<std::string, Tensor<T>> tensors_;
};

// Total number of scalars across all tensors.
template <typename T>
std::size_t param_count(const ParamStore<T>& store);

// Uniform in [-1/sqrt(fan_in), 1/sqrt(fan_in)].
template <typename T>
Tensor<T> init_uniform(Shape shape, std::size_t fan_in, Rng& rng);

template <typename T>
Tensor<T> init_zeros(Shape shape);

template <typename T>
Tensor<T> init_ones(Shape shape);

// One `<path>.pmt` file per tensor plus `manifest.txt` (path, dtype, shape).
template <typename T>
void save_params(const ParamStore<T>& store, const std::string& dir);

// Loads into an existing store whose key set and shapes must match.
template <typename T>
void load_params(ParamStore<T>& store, const std::string& dir);

}  // namespace pmatte
