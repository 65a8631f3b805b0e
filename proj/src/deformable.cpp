#include "uavd/deformable.hpp"

#include "uavd/init.hpp"
#include "uavd/kernels.hpp"

namespace uavd::deformable {

template <typename T>
ConvParams<T> ConvParams<T>::from(const ParameterStore<T>& store, const std::string& prefix) {
  return {store.at(prefix + ".weight"), store.at(prefix + ".bias")};
}

template <typename T>
TokenParams<T> TokenParams<T>::from(const ParameterStore<T>& store, const std::string& prefix) {
  return {ConvParams<T>::from(store, prefix + ".norm_conv"),
          ConvParams<T>::from(store, prefix + ".def_conv"),
          ConvParams<T>::from(store, prefix + ".offset_conv")};
}

template <typename T>
void TokenParams<T>::add(ParameterStore<T>& store, const std::string& prefix, Index in_channels,
                         Index out_channels, const TokenGeometry& geom, CounterRng& rng) {
  add_conv(store, prefix + ".norm_conv", out_channels, in_channels, geom.kernel, rng);
  add_conv(store, prefix + ".def_conv", out_channels, in_channels, geom.kernel, rng);
  add_conv(store, prefix + ".offset_conv", 2 * geom.kernel * geom.kernel, in_channels, geom.kernel,
           rng, Init::zeros);
}

template <typename T>
OffsetField<T> predict_offsets(const Tensor<T>& input, const ConvParams<T>& offset_conv,
                               const TokenGeometry& geom) {
  const Index want = 2 * geom.kernel * geom.kernel;
  if (offset_conv.weight.rank() != 4 || offset_conv.weight.dim(0) != want ||
      offset_conv.weight.dim(2) != geom.kernel) {
    throw ConfigError("offset conv weight " + to_string(offset_conv.weight.shape()) + " must have " +
                      std::to_string(want) + " output channels and kernel " + std::to_string(geom.kernel));
  }
  return {conv2d(input, offset_conv.weight, offset_conv.bias, geom.stride, geom.padding)};
}

template <typename T>
Tensor<T> deformable_conv2d(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias,
                            const OffsetField<T>& offsets, Index stride, Index padding) {
  if (input.rank() != 4 || weight.rank() != 4 || weight.dim(1) != input.dim(1) ||
      weight.dim(2) != weight.dim(3)) {
    throw ConfigError("deformable_conv2d shape mismatch: input " + to_string(input.shape()) +
                      ", weight " + to_string(weight.shape()));
  }
  kernels::ConvGeometry g{input.dim(0), input.dim(1), input.dim(2), input.dim(3),
                          weight.dim(0), weight.dim(2), stride, padding};
  kernels::validate(g);
  const Shape want{g.batch, 2 * g.taps(), g.out_height(), g.out_width()};
  if (offsets.offsets.shape() != want) {
    throw ConfigError("offset field " + to_string(offsets.offsets.shape()) +
                      " does not match output grid " + to_string(want));
  }
  if (bias.defined() && bias.size() != g.out_channels) {
    throw ConfigError("deformable_conv2d bias " + to_string(bias.shape()) + " does not match weight " +
                      to_string(weight.shape()));
  }
  const Shape out_shape{g.batch, g.out_channels, g.out_height(), g.out_width()};
  std::vector<T> out(static_cast<std::size_t>(numel(out_shape)));
  kernels::parallel::deform_conv2d_forward<T>(g, input.data(), weight.data(),
                                              bias.defined() ? bias.data() : std::span<const T>{},
                                              offsets.offsets.data(), out);
  std::vector<Tensor<T>> inputs{input, weight, offsets.offsets};
  if (bias.defined()) inputs.push_back(bias);
  return make_result<T>(out_shape, std::move(out), "deformable_conv2d", std::move(inputs),
                        [g](Node<T>& self) {
    Node<T>& in = *self.inputs[0];
    Node<T>& w = *self.inputs[1];
    Node<T>& off = *self.inputs[2];
    std::span<T> gi, gw, goff, gb;
    if (in.requires_grad) gi = in.grad_buffer();
    if (w.requires_grad) gw = w.grad_buffer();
    if (off.requires_grad) goff = off.grad_buffer();
    if (self.inputs.size() > 3 && self.inputs[3]->requires_grad) gb = self.inputs[3]->grad_buffer();
    kernels::parallel::deform_conv2d_backward<T>(g, in.value, w.value, off.value, self.grad, gi, gw,
                                                 gb, goff);
  });
}

template <typename T>
TokenMap<T> deformable_token(const Tensor<T>& input, const TokenParams<T>& params,
                             const TokenGeometry& geom) {
  if (params.norm_conv.weight.shape() != params.def_conv.weight.shape()) {
    throw ConfigError("deformable token branches differ: " + to_string(params.norm_conv.weight.shape()) +
                      " vs " + to_string(params.def_conv.weight.shape()));
  }
  const auto normal = conv2d(input, params.norm_conv.weight, params.norm_conv.bias, geom.stride, geom.padding);
  const auto offsets = predict_offsets(input, params.offset_conv, geom);
  const auto adaptive = deformable_conv2d(input, params.def_conv.weight, params.def_conv.bias, offsets,
                                          geom.stride, geom.padding);
  if (normal.shape() != adaptive.shape()) {
    throw ConfigError("deformable token branch shapes differ: " + to_string(normal.shape()) + " vs " +
                      to_string(adaptive.shape()));
  }
  return {add(normal, adaptive)};
}

#define UAVD_INSTANTIATE(T)                                                                       \
  template struct ConvParams<T>;                                                                  \
  template struct TokenParams<T>;                                                                 \
  template OffsetField<T> predict_offsets<T>(const Tensor<T>&, const ConvParams<T>&, const TokenGeometry&); \
  template Tensor<T> deformable_conv2d<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,   \
                                          const OffsetField<T>&, Index, Index);                   \
  template TokenMap<T> deformable_token<T>(const Tensor<T>&, const TokenParams<T>&, const TokenGeometry&);

UAVD_INSTANTIATE(float)
UAVD_INSTANTIATE(double)
#undef UAVD_INSTANTIATE

}  // namespace uavd::deformable
