#include "cellsearch/tensor.hpp"

#include <cmath>
#include <istream>
#include <limits>
#include <ostream>
#include <sstream>

#include "cellsearch/error.hpp"

namespace cellsearch {

Shape::Shape(std::initializer_list<std::int64_t> dims) : Shape(std::vector<std::int64_t>(dims)) {}

Shape::Shape(std::vector<std::int64_t> dims) : dims_(std::move(dims)) {
  std::int64_t n = 1;
  for (auto d : dims_) {
    if (d < 1) throw ShapeError("shape extents must be >= 1, got " + str());
    if (n > std::numeric_limits<std::int64_t>::max() / d) throw ShapeError("shape element count overflows: " + str());
    n *= d;
  }
}

std::int64_t Shape::numel() const {
  std::int64_t n = 1;
  for (auto d : dims_) n *= d;
  return n;
}

std::string Shape::str() const {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < dims_.size(); ++i) os << (i ? "," : "") << dims_[i];
  os << ')';
  return os.str();
}

template <typename T>
Tensor<T>::Tensor(Shape shape, T fill)
    : shape_(std::move(shape)), data_(static_cast<std::size_t>(shape_.numel()), fill) {}

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
  if (static_cast<std::int64_t>(data_.size()) != shape_.numel())
    throw ShapeError("tensor data length " + std::to_string(data_.size()) + " does not match shape " + shape_.str());
}

template <typename T>
void Tensor<T>::fill(T v) {
  std::fill(data_.begin(), data_.end(), v);
}

template <typename T>
Tensor<T> Tensor<T>::reshaped(Shape shape) const {
  if (shape.numel() != shape_.numel()) throw ShapeError("cannot reshape " + shape_.str() + " to " + shape.str());
  return Tensor(std::move(shape), data_);
}

template <typename T>
bool Tensor<T>::all_finite() const {
  for (T v : data_)
    if (!std::isfinite(v)) return false;
  return true;
}

template <typename T>
void write_tensor_text(std::ostream& out, const Tensor<T>& t) {
  out << "shape";
  for (auto d : t.shape().dims()) out << ' ' << d;
  out << '\n';
  out.precision(std::numeric_limits<T>::max_digits10);
  for (T v : t.data()) out << v << '\n';
}

template <typename T>
Tensor<T> read_tensor_text(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) throw ParseError("tensor dump: missing shape header");
  std::istringstream header(line);
  std::string tag;
  header >> tag;
  if (tag != "shape") throw ParseError("tensor dump: header must start with 'shape'");
  std::vector<std::int64_t> dims;
  for (std::int64_t d; header >> d;) dims.push_back(d);
  Shape shape(dims);
  std::vector<T> data;
  data.reserve(static_cast<std::size_t>(shape.numel()));
  for (T v; data.size() < static_cast<std::size_t>(shape.numel()) && in >> v;) data.push_back(v);
  if (static_cast<std::int64_t>(data.size()) != shape.numel()) throw ParseError("tensor dump: too few values");
  return Tensor<T>(std::move(shape), std::move(data));
}

template class Tensor<float>;
template class Tensor<double>;
template void write_tensor_text(std::ostream&, const Tensor<float>&);
template void write_tensor_text(std::ostream&, const Tensor<double>&);
template Tensor<float> read_tensor_text(std::istream&);
template Tensor<double> read_tensor_text(std::istream&);

}  // namespace cellsearch
