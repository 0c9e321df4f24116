#include "ac3d/flow_spectral.hpp"

#include <fftw3.h>

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <complex>
#include <limits>
#include <mutex>

#include "ac3d/parallel.hpp"

namespace ac3d::flow {

double SpectralVolume::total_power() const {
  double total = 0.0;
  for (const auto& b : bins) total += b.power;
  return total;
}

namespace {

template <typename Map>
auto find_key(const Map& map, double t) {
  auto best = map.end();
  double best_dist = 1e-9;
  for (auto it = map.begin(); it != map.end(); ++it) {
    const double d = std::abs(it->first - t);
    if (d <= best_dist) {
      best = it;
      best_dist = d;
    }
  }
  if (best == map.end()) throw FlowError("no spectrum recorded for t = " + std::to_string(t));
  return best;
}

}  // namespace

const SpectralVolume& TimestepSpectra::volume_at(double t) const { return find_key(volumes, t)->second; }
const std::vector<double>& TimestepSpectra::ratio_at(double t) const { return find_key(ratios, t)->second; }

// ---------------------------------------------------------------------------
// PCA to three channels

Tensor pca_to_rgb(const Tensor& latents, std::vector<std::string>* warnings) {
  if (latents.rank() != 4) throw FlowError("pca_to_rgb: expected [F, C, H, W]");
  const std::size_t frames = latents.dim(0), channels = latents.dim(1);
  const std::size_t h = latents.dim(2), w = latents.dim(3), n = h * w;
  if (channels < 3) throw FlowError("pca_to_rgb: need at least 3 channels");

  Tensor out({frames, 3, h, w}, 0.0f);
  const auto in = latents.data();
  for (std::size_t f = 0; f < frames; ++f) {
    // samples x channels
    Eigen::MatrixXd x(n, channels);
    for (std::size_t c = 0; c < channels; ++c)
      for (std::size_t i = 0; i < n; ++i) x(i, c) = in[(f * channels + c) * n + i];
    const Eigen::RowVectorXd mean = x.colwise().mean();
    x.rowwise() -= mean;
    const Eigen::MatrixXd cov = (x.transpose() * x) / static_cast<double>(n);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov);
    const Eigen::VectorXd& values = eig.eigenvalues();  // ascending
    const double top = std::max(values(channels - 1), 0.0);
    const double tol = std::max(1e-12, 1e-9 * top);

    std::size_t kept = 0;
    for (std::size_t k = 0; k < 3; ++k) {
      const Eigen::Index idx = static_cast<Eigen::Index>(channels - 1 - k);
      if (values(idx) <= tol) break;
      Eigen::VectorXd axis = eig.eigenvectors().col(idx);
      Eigen::Index arg = 0;
      axis.cwiseAbs().maxCoeff(&arg);
      if (axis(arg) < 0.0) axis = -axis;
      const Eigen::VectorXd proj = x * axis;
      const double lo = proj.minCoeff(), hi = proj.maxCoeff();
      float* dst = out.data().data() + (f * 3 + k) * n;
      for (std::size_t i = 0; i < n; ++i)
        dst[i] = hi > lo ? static_cast<float>((proj(static_cast<Eigen::Index>(i)) - lo) / (hi - lo)) : 0.0f;
      ++kept;
    }
    if (kept < 3 && warnings)
      warnings->push_back("pca_to_rgb: frame " + std::to_string(f) + " has covariance rank " +
                          std::to_string(kept) + " < 3; padded with zeros");
  }
  return out;
}

// ---------------------------------------------------------------------------
// Optical flow

namespace {

double sample(const Image& img, double y, double x) {
  const double ymax = static_cast<double>(img.rows() - 1), xmax = static_cast<double>(img.cols() - 1);
  y = std::clamp(y, 0.0, ymax);
  x = std::clamp(x, 0.0, xmax);
  const auto y0 = static_cast<Eigen::Index>(std::floor(y)), x0 = static_cast<Eigen::Index>(std::floor(x));
  const Eigen::Index y1 = std::min<Eigen::Index>(y0 + 1, img.rows() - 1);
  const Eigen::Index x1 = std::min<Eigen::Index>(x0 + 1, img.cols() - 1);
  const double fy = y - static_cast<double>(y0), fx = x - static_cast<double>(x0);
  return (1 - fy) * ((1 - fx) * img(y0, x0) + fx * img(y0, x1)) + fy * ((1 - fx) * img(y1, x0) + fx * img(y1, x1));
}

Image blur(const Image& in) {
  static constexpr double k[5] = {1.0 / 16, 4.0 / 16, 6.0 / 16, 4.0 / 16, 1.0 / 16};
  const Eigen::Index h = in.rows(), w = in.cols();
  Image tmp(h, w), out(h, w);
  for (Eigen::Index y = 0; y < h; ++y)
    for (Eigen::Index x = 0; x < w; ++x) {
      double s = 0.0;
      for (int d = -2; d <= 2; ++d) s += k[d + 2] * in(y, std::clamp<Eigen::Index>(x + d, 0, w - 1));
      tmp(y, x) = s;
    }
  for (Eigen::Index y = 0; y < h; ++y)
    for (Eigen::Index x = 0; x < w; ++x) {
      double s = 0.0;
      for (int d = -2; d <= 2; ++d) s += k[d + 2] * tmp(std::clamp<Eigen::Index>(y + d, 0, h - 1), x);
      out(y, x) = s;
    }
  return out;
}

Image resize(const Image& in, Eigen::Index h, Eigen::Index w) {
  Image out(h, w);
  const double sy = static_cast<double>(in.rows()) / static_cast<double>(h);
  const double sx = static_cast<double>(in.cols()) / static_cast<double>(w);
  for (Eigen::Index y = 0; y < h; ++y)
    for (Eigen::Index x = 0; x < w; ++x)
      out(y, x) = sample(in, (static_cast<double>(y) + 0.5) * sy - 0.5, (static_cast<double>(x) + 0.5) * sx - 0.5);
  return out;
}

Image grad_x(const Image& img) {
  Image g(img.rows(), img.cols());
  const Eigen::Index w = img.cols();
  for (Eigen::Index y = 0; y < img.rows(); ++y)
    for (Eigen::Index x = 0; x < w; ++x)
      g(y, x) = 0.5 * (img(y, std::min<Eigen::Index>(x + 1, w - 1)) - img(y, std::max<Eigen::Index>(x - 1, 0)));
  return g;
}

Image grad_y(const Image& img) {
  Image g(img.rows(), img.cols());
  const Eigen::Index h = img.rows();
  for (Eigen::Index y = 0; y < h; ++y)
    for (Eigen::Index x = 0; x < img.cols(); ++x)
      g(y, x) = 0.5 * (img(std::min<Eigen::Index>(y + 1, h - 1), x) - img(std::max<Eigen::Index>(y - 1, 0), x));
  return g;
}

// Horn-Schunck neighborhood average (weights 1/6 edge, 1/12 corner).
Image neighborhood_average(const Image& f) {
  const Eigen::Index h = f.rows(), w = f.cols();
  Image out(h, w);
  auto at = [&](Eigen::Index y, Eigen::Index x) {
    return f(std::clamp<Eigen::Index>(y, 0, h - 1), std::clamp<Eigen::Index>(x, 0, w - 1));
  };
  for (Eigen::Index y = 0; y < h; ++y)
    for (Eigen::Index x = 0; x < w; ++x)
      out(y, x) = (at(y - 1, x) + at(y + 1, x) + at(y, x - 1) + at(y, x + 1)) / 6.0 +
                  (at(y - 1, x - 1) + at(y - 1, x + 1) + at(y + 1, x - 1) + at(y + 1, x + 1)) / 12.0;
  return out;
}

std::vector<Image> to_images(const Tensor& t) {
  std::size_t c = 1, h = 0, w = 0;
  if (t.rank() == 2) {
    h = t.dim(0);
    w = t.dim(1);
  } else if (t.rank() == 3) {
    c = t.dim(0);
    h = t.dim(1);
    w = t.dim(2);
  } else {
    throw FlowError("estimate_flow: expected [H, W] or [C, H, W]");
  }
  std::vector<Image> out(c, Image(static_cast<Eigen::Index>(h), static_cast<Eigen::Index>(w)));
  const auto data = t.data();
  for (std::size_t k = 0; k < c; ++k)
    for (std::size_t i = 0; i < h * w; ++i) out[k].data()[i] = data[k * h * w + i];
  return out;
}

void refine_level(const std::vector<Image>& src, const std::vector<Image>& dst, Image& u, Image& v,
                  const FlowConfig& cfg) {
  const Eigen::Index h = u.rows(), w = u.cols();
  const double a2 = cfg.smoothness * cfg.smoothness;
  std::vector<Image> src_gx, src_gy;
  for (const auto& s : src) {
    src_gx.push_back(grad_x(s));
    src_gy.push_back(grad_y(s));
  }
  for (std::size_t warp = 0; warp < cfg.warps; ++warp) {
    Image j11 = Image::Zero(h, w), j12 = Image::Zero(h, w), j22 = Image::Zero(h, w);
    Image b1 = Image::Zero(h, w), b2 = Image::Zero(h, w);
    for (std::size_t c = 0; c < src.size(); ++c) {
      Image warped(h, w);
      for (Eigen::Index y = 0; y < h; ++y)
        for (Eigen::Index x = 0; x < w; ++x)
          warped(y, x) = sample(dst[c], static_cast<double>(y) + v(y, x), static_cast<double>(x) + u(y, x));
      const Image ix = 0.5 * (src_gx[c] + grad_x(warped));
      const Image iy = 0.5 * (src_gy[c] + grad_y(warped));
      const Image it = warped - src[c];
      j11 += ix * ix;
      j12 += ix * iy;
      j22 += iy * iy;
      b1 += ix * it;
      b2 += iy * it;
    }
    Image du = Image::Zero(h, w), dv = Image::Zero(h, w);
    for (std::size_t iter = 0; iter < cfg.iterations; ++iter) {
      const Image ubar = neighborhood_average(u + du);
      const Image vbar = neighborhood_average(v + dv);
      for (Eigen::Index y = 0; y < h; ++y)
        for (Eigen::Index x = 0; x < w; ++x) {
          const double r1 = a2 * (ubar(y, x) - u(y, x)) - b1(y, x);
          const double r2 = a2 * (vbar(y, x) - v(y, x)) - b2(y, x);
          const double m11 = j11(y, x) + a2, m12 = j12(y, x), m22 = j22(y, x) + a2;
          const double det = m11 * m22 - m12 * m12;
          du(y, x) = (m22 * r1 - m12 * r2) / det;
          dv(y, x) = (m11 * r2 - m12 * r1) / det;
        }
    }
    u += du;
    v += dv;
  }
}

}  // namespace

FlowField estimate_flow(const std::vector<Image>& src_in, const std::vector<Image>& dst_in, const FlowConfig& cfg) {
  if (src_in.empty() || src_in.size() != dst_in.size()) throw FlowError("estimate_flow: channel mismatch");
  const Eigen::Index h = src_in[0].rows(), w = src_in[0].cols();
  for (std::size_t c = 0; c < src_in.size(); ++c)
    if (src_in[c].rows() != h || src_in[c].cols() != w || dst_in[c].rows() != h || dst_in[c].cols() != w)
      throw FlowError("estimate_flow: frame dims differ");
  if (h < 16 || w < 16) throw FlowError("estimate_flow: image too small (need H, W >= 16)");
  if (cfg.levels == 0 || !(cfg.scale > 0.0 && cfg.scale < 1.0) || !(cfg.smoothness > 0.0))
    throw FlowError("estimate_flow: invalid configuration");

  FlowField result{Tensor({static_cast<std::size_t>(h), static_cast<std::size_t>(w), 2}, 0.0f)};

  // Joint [0, 255] normalization keeps the smoothness weight meaningful.
  double lo = std::numeric_limits<double>::infinity(), hi = -lo;
  for (std::size_t c = 0; c < src_in.size(); ++c) {
    lo = std::min({lo, src_in[c].minCoeff(), dst_in[c].minCoeff()});
    hi = std::max({hi, src_in[c].maxCoeff(), dst_in[c].maxCoeff()});
  }
  if (!(hi > lo)) return result;
  const double gain = 255.0 / (hi - lo);

  std::vector<std::vector<Image>> src_pyr(1), dst_pyr(1);
  for (std::size_t c = 0; c < src_in.size(); ++c) {
    src_pyr[0].push_back((src_in[c] - lo) * gain);
    dst_pyr[0].push_back((dst_in[c] - lo) * gain);
  }
  while (src_pyr.size() < cfg.levels) {
    const Image& prev = src_pyr.back()[0];
    const auto nh = static_cast<Eigen::Index>(std::lround(static_cast<double>(prev.rows()) * cfg.scale));
    const auto nw = static_cast<Eigen::Index>(std::lround(static_cast<double>(prev.cols()) * cfg.scale));
    if (std::min(nh, nw) < static_cast<Eigen::Index>(cfg.min_side)) break;
    std::vector<Image> s, d;
    for (std::size_t c = 0; c < src_in.size(); ++c) {
      s.push_back(resize(blur(src_pyr.back()[c]), nh, nw));
      d.push_back(resize(blur(dst_pyr.back()[c]), nh, nw));
    }
    src_pyr.push_back(std::move(s));
    dst_pyr.push_back(std::move(d));
  }

  Image u, v;
  for (std::size_t level = src_pyr.size(); level-- > 0;) {
    const Eigen::Index lh = src_pyr[level][0].rows(), lw = src_pyr[level][0].cols();
    if (u.size() == 0) {
      u = Image::Zero(lh, lw);
      v = Image::Zero(lh, lw);
    } else {
      const double ry = static_cast<double>(lh) / static_cast<double>(u.rows());
      const double rx = static_cast<double>(lw) / static_cast<double>(u.cols());
      u = resize(u, lh, lw) * rx;
      v = resize(v, lh, lw) * ry;
    }
    refine_level(src_pyr[level], dst_pyr[level], u, v, cfg);
  }

  auto out = result.values.data();
  for (Eigen::Index i = 0; i < h * w; ++i) {
    out[2 * i] = static_cast<float>(u.data()[i]);
    out[2 * i + 1] = static_cast<float>(v.data()[i]);
  }
  return result;
}

FlowField estimate_flow(const Tensor& src, const Tensor& dst, const FlowConfig& cfg) {
  if (src.dims() != dst.dims()) throw FlowError("estimate_flow: frame dims differ");
  return estimate_flow(to_images(src), to_images(dst), cfg);
}

std::pair<double, double> mean_flow(const FlowField& flow) {
  double sx = 0.0, sy = 0.0;
  const auto d = flow.values.data();
  const std::size_t n = d.size() / 2;
  for (std::size_t i = 0; i < n; ++i) {
    sx += d[2 * i];
    sy += d[2 * i + 1];
  }
  return {sx / static_cast<double>(n), sy / static_cast<double>(n)};
}

// ---------------------------------------------------------------------------
// Spectra

namespace {

std::mutex& fftw_planner_mutex() {
  static std::mutex m;
  return m;
}

// Full complex 2D DFT of a real row-major h x w field.
std::vector<std::complex<double>> dft2(const std::vector<double>& field, std::size_t h, std::size_t w) {
  std::vector<std::complex<double>> in(field.begin(), field.end()), out(h * w);
  fftw_plan plan;
  {
    std::lock_guard lock(fftw_planner_mutex());
    plan = fftw_plan_dft_2d(static_cast<int>(h), static_cast<int>(w), reinterpret_cast<fftw_complex*>(in.data()),
                            reinterpret_cast<fftw_complex*>(out.data()), FFTW_FORWARD, FFTW_ESTIMATE);
  }
  fftw_execute(plan);
  {
    std::lock_guard lock(fftw_planner_mutex());
    fftw_destroy_plan(plan);
  }
  return out;
}

}  // namespace

SpectralVolume spectral_volume(const std::vector<FlowField>& flows, std::size_t bins) {
  if (flows.empty()) throw FlowError("spectral_volume: no flow fields");
  if (bins < 2) throw FlowError("spectral_volume: need at least 2 bins");
  const std::size_t h = flows[0].height(), w = flows[0].width();
  for (const auto& f : flows)
    if (f.height() != h || f.width() != w) throw FlowError("spectral_volume: flow dims differ");

  const double step = 0.5 / static_cast<double>(bins - 1);
  std::vector<std::size_t> bin_of(h * w);
  for (std::size_t k = 0; k < h; ++k) {
    const double fk = (k <= h / 2 ? static_cast<double>(k) : static_cast<double>(k) - static_cast<double>(h)) /
                      static_cast<double>(h);
    for (std::size_t l = 0; l < w; ++l) {
      const double fl = (l <= w / 2 ? static_cast<double>(l) : static_cast<double>(l) - static_cast<double>(w)) /
                        static_cast<double>(w);
      const double nu = std::hypot(fk, fl);
      bin_of[k * w + l] = std::min(static_cast<std::size_t>(std::lround(nu / step)), bins - 1);
    }
  }

  SpectralVolume vol;
  vol.bins.resize(bins);
  for (std::size_t b = 0; b < bins; ++b) vol.bins[b].frequency = static_cast<double>(b) * step;
  std::vector<double> amp_sum(bins, 0.0);
  const double norm = static_cast<double>(h * w);
  std::vector<double> field(h * w);
  for (const auto& f : flows) {
    const auto d = f.values.data();
    for (std::size_t comp = 0; comp < 2; ++comp) {
      for (std::size_t i = 0; i < h * w; ++i) field[i] = d[2 * i + comp];
      const auto spec = dft2(field, h, w);
      for (std::size_t i = 0; i < h * w; ++i) {
        const double a = std::abs(spec[i]);
        auto& bin = vol.bins[bin_of[i]];
        amp_sum[bin_of[i]] += a / norm;
        bin.power += a * a / norm;
        ++bin.count;
      }
    }
  }
  const double n_fields = static_cast<double>(flows.size());
  for (std::size_t b = 0; b < bins; ++b) {
    auto& bin = vol.bins[b];
    bin.amplitude = bin.count > 0 ? amp_sum[b] / static_cast<double>(bin.count) : 0.0;
    bin.power /= n_fields;
    bin.count /= 2 * flows.size();
  }
  vol.pair_count = flows.size();
  return vol;
}

std::vector<std::pair<std::size_t, std::size_t>> anchor_pairs(std::size_t frames, std::size_t stride,
                                                              std::size_t horizon) {
  if (stride == 0) throw FlowError("anchor stride must be positive");
  std::vector<std::pair<std::size_t, std::size_t>> pairs;
  for (std::size_t a = 0; a < frames; a += stride)
    for (std::size_t b = a + 1; b <= std::min(a + horizon, frames - 1); ++b) pairs.emplace_back(a, b);
  return pairs;
}

std::vector<std::vector<Image>> video_frames(const Tensor& video, std::vector<std::string>* warnings) {
  if (video.rank() != 4) throw FlowError("expected a [F, C, H, W] video");
  const Tensor rgb = video.dim(1) > 3 ? pca_to_rgb(video, warnings) : video;
  const std::size_t frames = rgb.dim(0), channels = rgb.dim(1), h = rgb.dim(2), w = rgb.dim(3);
  std::vector<std::vector<Image>> out(frames);
  const auto d = rgb.data();
  for (std::size_t f = 0; f < frames; ++f)
    for (std::size_t c = 0; c < channels; ++c) {
      Image img(static_cast<Eigen::Index>(h), static_cast<Eigen::Index>(w));
      std::copy_n(d.data() + (f * channels + c) * h * w, h * w, img.data());
      out[f].push_back(std::move(img));
    }
  return out;
}

namespace {

std::vector<FlowField> video_flows(const Tensor& video, const FlowConfig& flow_cfg, const SpectrumConfig& cfg) {
  if (video.rank() != 4 || video.dim(0) < 2) throw FlowError("video needs at least 2 frames");
  const auto frames = video_frames(video);
  const auto pairs = anchor_pairs(frames.size(), cfg.anchor_stride, cfg.horizon);
  std::vector<FlowField> flows(pairs.size());
  parallel_for(pairs.size(), [&](std::size_t i) {
    flows[i] = estimate_flow(frames[pairs[i].first], frames[pairs[i].second], flow_cfg);
  });
  return flows;
}

}  // namespace

SpectralVolume video_spectrum(const Tensor& video, const FlowConfig& flow_cfg, const SpectrumConfig& cfg) {
  return spectral_volume(video_flows(video, flow_cfg, cfg), cfg.bins);
}

TimestepSpectra per_timestep_spectra(const std::map<double, std::vector<Tensor>>& denoised,
                                     const FlowConfig& flow_cfg, const SpectrumConfig& cfg) {
  if (denoised.empty() || std::abs(denoised.begin()->first) > 1e-9)
    throw FlowError("per_timestep_spectra: t = 0 predictions are required");
  TimestepSpectra out;
  for (const auto& [t, videos] : denoised) {
    if (videos.empty()) throw FlowError("per_timestep_spectra: no videos at t = " + std::to_string(t));
    std::vector<FlowField> flows;
    for (const auto& video : videos) {
      auto f = video_flows(video, flow_cfg, cfg);
      flows.insert(flows.end(), std::make_move_iterator(f.begin()), std::make_move_iterator(f.end()));
    }
    out.volumes.emplace(t, spectral_volume(flows, cfg.bins));
  }
  const auto& reference = out.volumes.begin()->second;
  for (const auto& [t, vol] : out.volumes) {
    std::vector<double> ratio(vol.bins.size());
    for (std::size_t b = 0; b < ratio.size(); ++b) {
      const double ref = reference.bins[b].amplitude, cur = vol.bins[b].amplitude;
      ratio[b] = ref > 0.0 ? cur / ref : (cur == 0.0 ? 1.0 : std::numeric_limits<double>::infinity());
    }
    out.ratios.emplace(t, std::move(ratio));
  }
  return out;
}

}  // namespace ac3d::flow
