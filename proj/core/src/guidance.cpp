#include "facecom/guidance.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

#include <png.h>

#include "facecom/errors.hpp"

namespace facecom {

void Camera::orthonormalize() {
  if (view.norm() < 1e-12) throw UsageError("camera view direction is zero");
  view.normalize();
  up -= up.dot(view) * view;
  if (up.norm() < 1e-9) throw UsageError("camera up vector is parallel to the view direction");
  up.normalize();
  if (width < 1 || height < 1 || !(extent > 0.0)) throw UsageError("camera resolution and extent must be positive");
}

Vec3 Camera::pixel_center(int px, int py) const {
  const double ps = pixel_size();
  const double s = (px + 0.5) * ps - 0.5 * extent;
  const double t = (0.5 * height - (py + 0.5)) * ps;
  return origin + s * right() + t * up;
}

DepthImage DepthImage::empty(int width, int height) {
  DepthImage img;
  img.width = width;
  img.height = height;
  const std::size_t n = static_cast<std::size_t>(width) * static_cast<std::size_t>(height);
  img.depth.assign(n, kNoDepth);
  img.valid.assign(n, 0);
  return img;
}

std::size_t DepthImage::valid_count() const {
  return static_cast<std::size_t>(std::count(valid.begin(), valid.end(), std::uint8_t{1}));
}

namespace {

struct Projected {
  std::vector<double> s, t, d;
};

Projected project(const TriMesh& mesh, const Camera& cam) {
  Projected p;
  const Vec3 right = cam.right();
  const std::size_t n = mesh.vertices.size();
  p.s.resize(n);
  p.t.resize(n);
  p.d.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const Vec3 q = mesh.vertices[i] - cam.origin;
    p.s[i] = q.dot(right);
    p.t[i] = q.dot(cam.up);
    p.d[i] = q.dot(cam.view);
  }
  return p;
}

inline double edge(double as, double at, double bs, double bt, double ps, double pt) {
  return (as - ps) * (bt - pt) - (bs - ps) * (at - pt);
}

}  // namespace

DepthImage render_depth(const TriMesh& mesh, const Camera& cam) {
  DepthImage img = DepthImage::empty(cam.width, cam.height);
  img.face.assign(img.size(), -1);
  img.barycentric.assign(img.size(), Vec3::Zero());
  const Projected p = project(mesh, cam);
  const double ps = cam.pixel_size();
  const double half_w = 0.5 * cam.extent;
  const double half_h = 0.5 * cam.height;
  for (std::size_t f = 0; f < mesh.faces.size(); ++f) {
    const Face& fc = mesh.faces[f];
    const std::size_t a = static_cast<std::size_t>(fc[0]);
    const std::size_t b = static_cast<std::size_t>(fc[1]);
    const std::size_t c = static_cast<std::size_t>(fc[2]);
    const double area = edge(p.s[a], p.t[a], p.s[b], p.t[b], p.s[c], p.t[c]);
    if (std::abs(area) < 1e-12) continue;  // edge-on
    const double smin = std::min({p.s[a], p.s[b], p.s[c]});
    const double smax = std::max({p.s[a], p.s[b], p.s[c]});
    const double tmin = std::min({p.t[a], p.t[b], p.t[c]});
    const double tmax = std::max({p.t[a], p.t[b], p.t[c]});
    const int x0 = std::max(0, static_cast<int>(std::ceil((smin + half_w) / ps - 0.5)));
    const int x1 = std::min(cam.width - 1, static_cast<int>(std::floor((smax + half_w) / ps - 0.5)));
    const int y0 = std::max(0, static_cast<int>(std::ceil(half_h - 0.5 - tmax / ps)));
    const int y1 = std::min(cam.height - 1, static_cast<int>(std::floor(half_h - 0.5 - tmin / ps)));
    for (int py = y0; py <= y1; ++py) {
      const double pt = (half_h - (py + 0.5)) * ps;
      for (int px = x0; px <= x1; ++px) {
        const double pps = (px + 0.5) * ps - half_w;
        const double w0 = edge(p.s[b], p.t[b], p.s[c], p.t[c], pps, pt) / area;
        const double w1 = edge(p.s[c], p.t[c], p.s[a], p.t[a], pps, pt) / area;
        const double w2 = edge(p.s[a], p.t[a], p.s[b], p.t[b], pps, pt) / area;
        if (w0 < 0.0 || w1 < 0.0 || w2 < 0.0) continue;
        const double sum = w0 + w1 + w2;
        const Vec3 w(w0 / sum, w1 / sum, w2 / sum);
        const double d = w(0) * p.d[a] + w(1) * p.d[b] + w(2) * p.d[c];
        const std::size_t k = static_cast<std::size_t>(py) * static_cast<std::size_t>(cam.width) + static_cast<std::size_t>(px);
        if (img.valid[k] && !(d < img.depth[k])) continue;
        img.valid[k] = 1;
        img.depth[k] = d;
        img.face[k] = static_cast<int>(f);
        img.barycentric[k] = w;
      }
    }
  }
  return img;
}

std::vector<Vec3> render_depth_backward(const TriMesh& mesh, const Camera& cam, const DepthImage& forward,
                                        const std::vector<double>& upstream) {
  if (upstream.size() != forward.size() || forward.face.size() != forward.size())
    throw NumericError("render backward: upstream gradient does not match the rendered image");
  std::vector<Vec3> grad(mesh.vertices.size(), Vec3::Zero());
  const Projected p = project(mesh, cam);
  const Vec3 right = cam.right();
  for (std::size_t k = 0; k < forward.size(); ++k) {
    if (!forward.valid[k] || upstream[k] == 0.0) continue;
    const Face& fc = mesh.faces[static_cast<std::size_t>(forward.face[k])];
    const Vec3& w = forward.barycentric[k];
    std::size_t v[3];
    for (int i = 0; i < 3; ++i) v[i] = static_cast<std::size_t>(fc[static_cast<std::size_t>(i)]);
    // In-plane gradient of the depth plane.
    Eigen::Matrix2d m;
    m << p.s[v[1]] - p.s[v[0]], p.t[v[1]] - p.t[v[0]], p.s[v[2]] - p.s[v[0]], p.t[v[2]] - p.t[v[0]];
    const Eigen::Vector2d g = m.partialPivLu().solve(Eigen::Vector2d(p.d[v[1]] - p.d[v[0]], p.d[v[2]] - p.d[v[0]]));
    const Vec3 lateral = g(0) * right + g(1) * cam.up;
    for (int i = 0; i < 3; ++i) grad[v[i]] += upstream[k] * w(i) * (cam.view - lateral);
  }
  return grad;
}

std::vector<std::uint8_t> inpaint_mask(const DepthImage& observed, const DepthImage& reference) {
  if (observed.size() != reference.size()) throw NumericError("inpaint mask: image sizes differ");
  std::vector<std::uint8_t> mask(observed.size(), 0);
  for (std::size_t k = 0; k < mask.size(); ++k) mask[k] = !observed.valid[k] && reference.valid[k];
  return mask;
}

double inp_loss(const DepthImage& fit, const DepthImage& guide, std::size_t* shared_pixels) {
  if (fit.width != guide.width || fit.height != guide.height)
    throw NumericError("guidance loss: image sizes differ");
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t k = 0; k < fit.size(); ++k) {
    if (!fit.valid[k] || !guide.valid[k]) continue;
    const double d = fit.depth[k] - guide.depth[k];
    total += d * d;
    ++count;
  }
  if (shared_pixels) *shared_pixels = count;
  if (count == 0) throw NumericError("guidance loss: the images share no valid pixel");
  return total / static_cast<double>(count);
}

ad::Var inp_loss(ad::Var vertices, const std::vector<Face>& faces, const Camera& cam, const DepthImage& guide) {
  if (vertices.cols() != 3) throw NumericError("guidance loss: vertices must be N x 3");
  auto mesh = std::make_shared<TriMesh>();
  mesh->faces = faces;
  mesh->vertices.resize(static_cast<std::size_t>(vertices.rows()));
  for (Eigen::Index i = 0; i < vertices.rows(); ++i)
    mesh->vertices[static_cast<std::size_t>(i)] = vertices.value().row(i).transpose();
  auto fit = std::make_shared<DepthImage>(render_depth(*mesh, cam));
  std::size_t count = 0;
  ad::Matrix out(1, 1);
  out(0, 0) = inp_loss(*fit, guide, &count);
  const DepthImage* g = &guide;
  return vertices.tape()->record(
      {vertices}, std::move(out),
      [mesh, fit, g, cam, count](const ad::Matrix& grad_out, std::span<ad::Matrix* const> gi) {
        if (!gi[0]) return;
        std::vector<double> upstream(fit->size(), 0.0);
        const double factor = 2.0 * grad_out(0, 0) / static_cast<double>(count);
        for (std::size_t k = 0; k < upstream.size(); ++k)
          if (fit->valid[k] && g->valid[k]) upstream[k] = factor * (fit->depth[k] - g->depth[k]);
        const std::vector<Vec3> grad = render_depth_backward(*mesh, cam, *fit, upstream);
        for (std::size_t i = 0; i < grad.size(); ++i) gi[0]->row(static_cast<Eigen::Index>(i)) += grad[i].transpose();
      });
}

namespace {

DepthImage fill(const DepthImage& observed, const std::vector<std::uint8_t>& mask, const DepthImage& source) {
  if (mask.size() != observed.size() || source.size() != observed.size())
    throw NumericError("inpaint: observation, mask and source sizes differ");
  DepthImage out = DepthImage::empty(observed.width, observed.height);
  for (std::size_t k = 0; k < out.size(); ++k) {
    if (observed.valid[k]) {
      out.valid[k] = 1;
      out.depth[k] = observed.depth[k];
    } else if (mask[k] && source.valid[k]) {
      out.valid[k] = 1;
      out.depth[k] = source.depth[k];
    }
  }
  return out;
}

class RenderProvider : public GuidanceProvider {
 public:
  RenderProvider(std::string name, DepthImage source) : name_(std::move(name)), source_(std::move(source)) {}
  std::string name() const override { return name_; }
  DepthImage inpaint(const DepthImage& observed, const std::vector<std::uint8_t>& mask) const override {
    return fill(observed, mask, source_);
  }

 private:
  std::string name_;
  DepthImage source_;
};

class NearestProvider : public GuidanceProvider {
 public:
  explicit NearestProvider(std::vector<DepthImage> renders) : renders_(std::move(renders)) {
    if (renders_.empty()) throw DataError("nearest-neighbour guidance needs at least one training render");
  }
  std::string name() const override { return "nn"; }
  DepthImage inpaint(const DepthImage& observed, const std::vector<std::uint8_t>& mask) const override {
    const int best = nearest_render(renders_, observed);
    if (best < 0) return fill(observed, std::vector<std::uint8_t>(mask.size(), 0), observed);
    return fill(observed, mask, renders_[static_cast<std::size_t>(best)]);
  }

 private:
  std::vector<DepthImage> renders_;
};

}  // namespace

int nearest_render(const std::vector<DepthImage>& renders, const DepthImage& observed) {
  int best = -1;
  double best_score = std::numeric_limits<double>::infinity();
  for (std::size_t r = 0; r < renders.size(); ++r) {
    const DepthImage& img = renders[r];
    if (img.size() != observed.size()) throw DataError("training render size differs from the observation");
    double total = 0.0;
    std::size_t count = 0;
    for (std::size_t k = 0; k < img.size(); ++k) {
      if (!img.valid[k] || !observed.valid[k]) continue;
      total += std::abs(img.depth[k] - observed.depth[k]);
      ++count;
    }
    if (count == 0) continue;
    const double score = total / static_cast<double>(count);
    if (score < best_score) {
      best_score = score;
      best = static_cast<int>(r);
    }
  }
  return best;
}

std::unique_ptr<GuidanceProvider> oracle_provider(const TriMesh& ground_truth, const Camera& cam) {
  return std::make_unique<RenderProvider>("oracle", render_depth(ground_truth, cam));
}

std::unique_ptr<GuidanceProvider> meanface_provider(const TriMesh& mean_face, const Camera& cam) {
  return std::make_unique<RenderProvider>("meanface", render_depth(mean_face, cam));
}

std::unique_ptr<GuidanceProvider> nn_provider(std::vector<DepthImage> training_renders) {
  return std::make_unique<NearestProvider>(std::move(training_renders));
}

std::unique_ptr<GuidanceProvider> make_provider(const std::string& kind, const TriMesh* ground_truth,
                                                const TriMesh* mean_face, std::vector<DepthImage> training_renders,
                                                const Camera& cam) {
  if (kind == "off") return nullptr;
  if (kind == "oracle") {
    if (!ground_truth) throw UsageError("oracle guidance needs the ground-truth mesh");
    return oracle_provider(*ground_truth, cam);
  }
  if (kind == "meanface") {
    if (!mean_face) throw UsageError("meanface guidance needs the dataset mean");
    return meanface_provider(*mean_face, cam);
  }
  if (kind == "nn") return nn_provider(std::move(training_renders));
  throw UsageError("unknown guidance '" + kind + "' (expected off, oracle, meanface or nn)");
}

namespace {

// Big-endian 16-bit gray rows, already encoded.
void write_png16(const std::filesystem::path& path, int width, int height, const std::vector<png_byte>& data) {
  FILE* fp = std::fopen(path.string().c_str(), "wb");
  if (!fp) throw DataError("cannot write " + path.string());
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info || setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    std::fclose(fp);
    throw DataError("PNG encoding failed for " + path.string());
  }
  png_init_io(png, fp);
  png_set_IHDR(png, info, static_cast<png_uint_32>(width), static_cast<png_uint_32>(height), 16, PNG_COLOR_TYPE_GRAY,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (int y = 0; y < height; ++y)
    png_write_row(png, const_cast<png_byte*>(data.data()) + static_cast<std::size_t>(y) * static_cast<std::size_t>(width) * 2);
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  std::fclose(fp);
}

}  // namespace

void write_depth_png(const std::filesystem::path& path, const DepthImage& img) {
  double lo = std::numeric_limits<double>::infinity();
  double hi = -lo;
  for (std::size_t k = 0; k < img.size(); ++k)
    if (img.valid[k]) {
      lo = std::min(lo, img.depth[k]);
      hi = std::max(hi, img.depth[k]);
    }
  const double span = hi > lo ? hi - lo : 1.0;
  std::vector<png_byte> data(img.size() * 2);
  for (std::size_t k = 0; k < img.size(); ++k) {
    std::uint16_t v = 0;
    if (img.valid[k]) v = static_cast<std::uint16_t>(1 + std::lround((hi - img.depth[k]) / span * 65534.0));
    data[k * 2] = static_cast<png_byte>(v >> 8);
    data[k * 2 + 1] = static_cast<png_byte>(v & 0xff);
  }
  write_png16(path, img.width, img.height, data);
}

void write_depth_raw(const std::filesystem::path& path, const DepthImage& img) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  for (std::size_t k = 0; k < img.size(); ++k) {
    const float v = img.valid[k] ? static_cast<float>(img.depth[k]) : std::numeric_limits<float>::quiet_NaN();
    char bytes[4];
    std::memcpy(bytes, &v, 4);
    out.write(bytes, 4);
  }
  if (!out) throw DataError("failed writing " + path.string());
}

DepthImage read_depth_raw(const std::filesystem::path& path, int width, int height) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read " + path.string());
  DepthImage img = DepthImage::empty(width, height);
  for (std::size_t k = 0; k < img.size(); ++k) {
    char bytes[4];
    if (!in.read(bytes, 4)) throw DataError(path.string() + " is shorter than " + std::to_string(width) + "x" + std::to_string(height));
    float v;
    std::memcpy(&v, bytes, 4);
    if (!std::isnan(v)) {
      img.valid[k] = 1;
      img.depth[k] = v;
    }
  }
  return img;
}

}  // namespace facecom
