#pragma once

#include <Eigen/Core>
#include <map>
#include <string>
#include <vector>

#include "ac3d/error.hpp"
#include "ac3d/tensorio.hpp"

namespace ac3d::flow {

using Image = Eigen::Array<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Dense displacement field, dims [H, W, 2] holding (dx, dy) in pixels.
struct FlowField {
  Tensor values;

  std::size_t height() const { return values.dim(0); }
  std::size_t width() const { return values.dim(1); }
  float dx(std::size_t y, std::size_t x) const { return values.at(y, x, 0); }
  float dy(std::size_t y, std::size_t x) const { return values.at(y, x, 1); }
};

struct SpectralBin {
  double frequency = 0.0;  // bin center, cycles per pixel
  double amplitude = 0.0;  // mean |F| / (H W) over the bin's frequencies
  double power = 0.0;      // sum |F|^2 / (H W), summed over dx and dy
  std::size_t count = 0;   // frequencies per field and component that fell in the bin
};

struct SpectralVolume {
  std::vector<SpectralBin> bins;
  std::size_t pair_count = 0;

  double total_power() const;
};

struct TimestepSpectra {
  std::map<double, SpectralVolume> volumes;
  std::map<double, std::vector<double>> ratios;

  /// Lookup tolerant to float round-off in the timestep key.
  const SpectralVolume& volume_at(double t) const;
  const std::vector<double>& ratio_at(double t) const;
};

struct FlowConfig {
  std::size_t levels = 4;
  double scale = 0.5;
  std::size_t min_side = 16;
  double smoothness = 15.0;
  std::size_t iterations = 30;  // Jacobi sweeps per warp
  std::size_t warps = 3;        // re-linearizations per pyramid level
};

struct SpectrumConfig {
  std::size_t bins = 32;
  std::size_t anchor_stride = 6;
  std::size_t horizon = 24;
};

class FlowError : public DataError {
 public:
  using DataError::DataError;
};

/// Per-frame PCA of [F, C, H, W] latents down to [F, 3, H, W], each output
/// channel rescaled to [0, 1]. Channels beyond the covariance rank are zero;
/// a message is appended to `warnings` for each such frame.
Tensor pca_to_rgb(const Tensor& latents, std::vector<std::string>* warnings = nullptr);

/// Coarse-to-fine Horn-Schunck with warping. Inputs are [H, W] or [C, H, W].
FlowField estimate_flow(const Tensor& src, const Tensor& dst, const FlowConfig& cfg = {});
FlowField estimate_flow(const std::vector<Image>& src, const std::vector<Image>& dst, const FlowConfig& cfg = {});

/// Radially binned amplitude spectrum of dx and dy, averaged over the fields.
SpectralVolume spectral_volume(const std::vector<FlowField>& flows, std::size_t bins = 32);

/// Frame pairs (anchor, target) visited by the anchor/horizon scheme.
std::vector<std::pair<std::size_t, std::size_t>> anchor_pairs(std::size_t frames, std::size_t stride,
                                                              std::size_t horizon);

/// Splits a [F, C, H, W] video into per-frame channel images, reducing C > 3
/// with pca_to_rgb first.
std::vector<std::vector<Image>> video_frames(const Tensor& video, std::vector<std::string>* warnings = nullptr);

TimestepSpectra per_timestep_spectra(const std::map<double, std::vector<Tensor>>& denoised,
                                     const FlowConfig& flow_cfg = {}, const SpectrumConfig& cfg = {});

/// Spectral volume of one video over the anchor/horizon frame pairs.
SpectralVolume video_spectrum(const Tensor& video, const FlowConfig& flow_cfg = {}, const SpectrumConfig& cfg = {});

/// Mean (dx, dy) over the field.
std::pair<double, double> mean_flow(const FlowField& flow);

}  // namespace ac3d::flow
