#pragma once

// Orthographic depth rendering with frozen-assignment gradients, and the
// providers that fill the unobserved part of a depth image.

#include <cstdint>
#include <filesystem>
#include <limits>
#include <memory>
#include <string>
#include <vector>

#include "facecom/autodiff.hpp"
#include "facecom/mesh.hpp"

namespace facecom {

struct Camera {
  Vec3 view{0.0, 0.0, -1.0};   // unit; depth grows along it
  Vec3 up{0.0, 1.0, 0.0};      // orthogonalized against view
  Vec3 origin{0.0, 0.0, 200.0};  // centre of the image plane; depth 0 there
  double extent = 180.0;       // image width in mm; height scales with the aspect ratio
  int width = 128;
  int height = 128;

  // Gram-Schmidt on up; throws UsageError for a zero view or up parallel to view.
  void orthonormalize();
  Vec3 right() const { return view.cross(up); }
  double pixel_size() const { return extent / width; }
  // Image-plane point at the centre of pixel (px, py); row 0 is at the top.
  Vec3 pixel_center(int px, int py) const;
};

inline const double kNoDepth = std::numeric_limits<double>::quiet_NaN();

struct DepthImage {
  int width = 0;
  int height = 0;
  std::vector<double> depth;   // row-major, kNoDepth where invalid
  std::vector<std::uint8_t> valid;
  // Rasterizer bookkeeping for the backward pass; empty for provider output.
  std::vector<int> face;
  std::vector<Vec3> barycentric;

  static DepthImage empty(int width, int height);
  std::size_t size() const { return depth.size(); }
  std::size_t valid_count() const;
  double covered_fraction() const { return size() ? static_cast<double>(valid_count()) / static_cast<double>(size()) : 0.0; }
};

// Z-buffer rasterization of pixel centres; depth is the barycentric
// interpolation of vertex depths. Ties keep the lower face index.
DepthImage render_depth(const TriMesh& mesh, const Camera& cam);

// Per-vertex gradient of sum_p upstream[p] * depth[p] with the pixel to
// triangle assignment of `forward` held fixed. Includes the in-plane terms
// from moving the interpolation plane under a fixed pixel.
std::vector<Vec3> render_depth_backward(const TriMesh& mesh, const Camera& cam, const DepthImage& forward,
                                        const std::vector<double>& upstream);

// Pixels to inpaint: invalid in the observation, valid in the reference.
std::vector<std::uint8_t> inpaint_mask(const DepthImage& observed, const DepthImage& reference);

// Mean squared depth difference over pixels valid in both images. Throws
// NumericError when no pixel is shared.
double inp_loss(const DepthImage& fit, const DepthImage& guide, std::size_t* shared_pixels = nullptr);

// The same loss as a tape operation on vertex positions (N x 3): renders
// `faces` at the current positions and back-propagates through the
// frozen assignment.
ad::Var inp_loss(ad::Var vertices, const std::vector<Face>& faces, const Camera& cam, const DepthImage& guide);

class GuidanceProvider {
 public:
  virtual ~GuidanceProvider() = default;
  virtual std::string name() const = 0;
  // Keeps every observed pixel and fills masked pixels where the provider
  // has a value.
  virtual DepthImage inpaint(const DepthImage& observed, const std::vector<std::uint8_t>& mask) const = 0;
};

// Fills masked pixels from the ground-truth render (test oracle).
std::unique_ptr<GuidanceProvider> oracle_provider(const TriMesh& ground_truth, const Camera& cam);
// Fills masked pixels from the render of the dataset mean.
std::unique_ptr<GuidanceProvider> meanface_provider(const TriMesh& mean_face, const Camera& cam);
// Picks the training render with the smallest mean |depth difference| over
// pixels valid in both it and the observation (ties: lower index) and fills
// masked pixels from it. Throws DataError for an empty set.
std::unique_ptr<GuidanceProvider> nn_provider(std::vector<DepthImage> training_renders);
std::unique_ptr<GuidanceProvider> make_provider(const std::string& kind, const TriMesh* ground_truth,
                                                const TriMesh* mean_face, std::vector<DepthImage> training_renders,
                                                const Camera& cam);

// Index chosen by the nearest-neighbour rule; -1 when nothing overlaps.
int nearest_render(const std::vector<DepthImage>& renders, const DepthImage& observed);

// 16-bit grayscale PNG: valid depths map linearly onto [1, 65535] over
// their own range (nearer is brighter), invalid pixels are 0.
void write_depth_png(const std::filesystem::path& path, const DepthImage& img);
// Row-major little-endian float32, NaN where invalid.
void write_depth_raw(const std::filesystem::path& path, const DepthImage& img);
DepthImage read_depth_raw(const std::filesystem::path& path, int width, int height);

}  // namespace facecom
