#include "xdiff/datasim.hpp"

#include <algorithm>
#include <charconv>
#include <cctype>
#include <cmath>
#include <limits>
#include <tuple>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <sstream>

#include "xdiff/io.hpp"

namespace xdiff {
namespace {

double profile(double rho, double delta) {
  if (rho >= 1.0) return 0.0;
  if (rho <= 1.0 - delta) return 1.0;
  return 0.5 * (1.0 + std::cos(std::numbers::pi * (rho - (1.0 - delta)) / delta));
}

double ellipse_rho(const EllipseSpec& e, double x, double y) {
  const double dx = x - e.cx, dy = y - e.cy;
  const double c = std::cos(e.angle), s = std::sin(e.angle);
  const double u = (dx * c + dy * s) / e.ax;
  const double w = (-dx * s + dy * c) / e.ay;
  return std::sqrt(u * u + w * w);
}

double edge_delta(const EllipseSpec& e, double edge_px) {
  return std::min(0.9, edge_px / std::min(e.ax, e.ay));
}

void check_range(const Range& r, const char* name) {
  if (!(r.lo <= r.hi)) throw InvalidArgument(std::string("degenerate range for ") + name);
}

void check_range(const IntRange& r, const char* name) {
  if (r.lo > r.hi || r.lo < 0) throw InvalidArgument(std::string("degenerate range for ") + name);
}

// Shortest decimal with at most `digits` fractional digits.
std::string trimmed(double v, int digits) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  std::string s = buf;
  if (s.find('.') != std::string::npos) {
    while (s.back() == '0') s.pop_back();
    if (s.back() == '.') s.pop_back();
  }
  if (s == "-0") s = "0";
  return s;
}

std::string fixed(double v, int digits) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

struct PromptPiece {
  const char* literal;
  const char* field;
};

constexpr PromptPiece kPrompt[] = {
    {"A slice of PET image: patient weight: ", "weight"},
    {" kg; height: ", "height"},
    {"m; inject dose: ", "dose"},
    {" MBq; image describe: DRF=", "drf"},
    {"; SUVmax: ", "suv_max"},
    {"; SUVmean: ", "suv_mean"},
};
constexpr const char* kPromptEnd = ".";

}  // namespace

double Range::draw(Rng& rng) const { return lo + (hi - lo) * uniform01(rng); }

int IntRange::draw(Rng& rng) const {
  return lo + static_cast<int>(rng() % static_cast<std::uint64_t>(hi - lo + 1));
}

void PhantomSpec::validate() const {
  if (image_size < 16) throw InvalidArgument("phantom image_size must be >= 16");
  check_range(body_ax, "body_ax");
  check_range(body_ay, "body_ay");
  check_range(body_activity, "body_activity");
  check_range(liver_scale, "liver_scale");
  check_range(liver_activity, "liver_activity");
  check_range(extra_count, "extra_count");
  check_range(extra_axis, "extra_axis");
  check_range(extra_activity, "extra_activity");
  check_range(lesion_count, "lesion_count");
  check_range(lesion_radius_px, "lesion_radius_px");
  check_range(lesion_activity, "lesion_activity");
  if (body_ax.lo <= 0.0 || body_ay.lo <= 0.0 || body_ax.hi >= 1.0 || body_ay.hi >= 1.0) {
    throw InvalidArgument("body axes must lie in (0, 1)");
  }
  if (lesion_radius_px.lo <= 0.0 || extra_axis.lo <= 0.0 || liver_scale.lo <= 0.0) {
    throw InvalidArgument("sizes must be positive");
  }
  if (body_activity.lo < 0.0 || liver_activity.lo < 0.0 || lesion_activity.lo <= 0.0) {
    throw InvalidArgument("activities must be non-negative");
  }
  if (edge_px < 0.0) throw InvalidArgument("edge_px must be non-negative");
}

Phantom generate_phantom(std::uint64_t seed, const PhantomSpec& spec) {
  spec.validate();
  Rng rng = make_rng(seed, "phantom");
  const int n = spec.image_size;
  const double half = 0.5 * n;
  std::vector<EllipseSpec> es;

  EllipseSpec body;
  body.role = EllipseRole::body;
  body.ax = spec.body_ax.draw(rng) * half;
  body.ay = spec.body_ay.draw(rng) * half;
  body.cx = (uniform01(rng) - 0.5) * 0.06 * half;
  body.cy = (uniform01(rng) - 0.5) * 0.06 * half;
  body.angle = (uniform01(rng) - 0.5) * 0.2;
  body.activity = spec.body_activity.draw(rng);
  es.push_back(body);

  const double cb = std::cos(body.angle), sb = std::sin(body.angle);
  auto body_point = [&](double u, double w) {
    return std::pair{body.cx + u * body.ax * cb - w * body.ay * sb,
                     body.cy + u * body.ax * sb + w * body.ay * cb};
  };

  EllipseSpec liver;
  liver.role = EllipseRole::liver;
  const double ls = spec.liver_scale.draw(rng);
  liver.ax = ls * body.ax;
  liver.ay = 0.85 * ls * body.ay;
  std::tie(liver.cx, liver.cy) = body_point(-0.38, -0.18);
  liver.angle = body.angle + (uniform01(rng) - 0.5) * 0.4;
  liver.activity = spec.liver_activity.draw(rng);
  es.push_back(liver);

  const int n_extra = spec.extra_count.draw(rng);
  for (int i = 0; i < n_extra; ++i) {
    for (int tries = 0; tries < 200; ++tries) {
      EllipseSpec e;
      e.role = EllipseRole::extra;
      const double r = 0.65 * std::sqrt(uniform01(rng));
      const double ph = 2.0 * std::numbers::pi * uniform01(rng);
      std::tie(e.cx, e.cy) = body_point(r * std::cos(ph), r * std::sin(ph));
      e.ax = spec.extra_axis.draw(rng) * half;
      e.ay = spec.extra_axis.draw(rng) * half;
      e.angle = std::numbers::pi * uniform01(rng);
      e.activity = spec.extra_activity.draw(rng);
      const double reach = std::max(e.ax, e.ay);
      const double gap = ellipse_rho(liver, e.cx, e.cy) - 1.0 - reach / std::min(liver.ax, liver.ay);
      if (gap > 0.1) {
        es.push_back(e);
        break;
      }
    }
  }

  const int n_lesion = spec.lesion_count.draw(rng);
  std::vector<EllipseSpec> lesions;
  for (int i = 0; i < n_lesion; ++i) {
    for (int tries = 0; tries < 500; ++tries) {
      EllipseSpec e;
      e.role = EllipseRole::lesion;
      const double rad = spec.lesion_radius_px.draw(rng);
      const double r = 0.75 * std::sqrt(uniform01(rng));
      const double ph = 2.0 * std::numbers::pi * uniform01(rng);
      std::tie(e.cx, e.cy) = body_point(r * std::cos(ph), r * std::sin(ph));
      e.ax = e.ay = rad;
      e.activity = spec.lesion_activity.draw(rng);
      const double liver_gap =
          ellipse_rho(liver, e.cx, e.cy) - 1.0 - (rad + 2.0) / std::min(liver.ax, liver.ay);
      bool ok = liver_gap > 0.0;
      for (const auto& o : lesions) {
        if (std::hypot(o.cx - e.cx, o.cy - e.cy) < o.ax + rad + 2.0) ok = false;
      }
      if (ok) {
        lesions.push_back(e);
        break;
      }
    }
  }
  es.insert(es.end(), lesions.begin(), lesions.end());

  Phantom p;
  p.image = Image(n, n);
  p.lesion_mask = Mask(n, n);
  p.liver_mask = Mask(n, n);
  p.body_mask = Mask(n, n);
  const double c = 0.5 * (n - 1);
  for (int r = 0; r < n; ++r) {
    for (int q = 0; q < n; ++q) {
      const double x = q - c, y = r - c;
      double v = 0.0;
      bool in_lesion = false;
      for (const auto& e : es) {
        const double rho = ellipse_rho(e, x, y);
        const double d = edge_delta(e, spec.edge_px);
        v += e.activity * profile(rho, d);
        if (e.role == EllipseRole::lesion && rho <= 1.0 - 0.5 * d) in_lesion = true;
        if (e.role == EllipseRole::body && rho < 1.0) p.body_mask(r, q) = 1;
        if (e.role == EllipseRole::liver && rho <= 1.0 - d) p.liver_mask(r, q) = 1;
      }
      p.image(r, q) = std::max(v, 0.0);
      if (in_lesion) {
        p.lesion_mask(r, q) = 1;
        p.liver_mask(r, q) = 0;
      }
    }
  }
  p.ellipses = std::move(es);
  return p;
}

void MetaInfo::validate() const {
  if (!(weight_kg > 0 && height_m > 0 && injected_dose_mbq > 0 && suv_max > 0 && suv_mean > 0)) {
    throw InvalidArgument("meta fields must be positive");
  }
  if (!(drf >= 1.0)) throw InvalidArgument("meta drf must be >= 1");
  if (suv_max < suv_mean) throw InvalidArgument("meta suv_max below suv_mean");
}

nlohmann::json MetaInfo::to_json() const {
  return {{"weight_kg", weight_kg}, {"height_m", height_m}, {"injected_dose_mbq", injected_dose_mbq},
          {"drf", drf},             {"suv_max", suv_max},   {"suv_mean", suv_mean}};
}

MetaInfo MetaInfo::from_json(const nlohmann::json& j) {
  MetaInfo m;
  try {
    m.weight_kg = j.at("weight_kg").get<double>();
    m.height_m = j.at("height_m").get<double>();
    m.injected_dose_mbq = j.at("injected_dose_mbq").get<double>();
    m.drf = j.at("drf").get<double>();
    m.suv_max = j.at("suv_max").get<double>();
    m.suv_mean = j.at("suv_mean").get<double>();
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("meta json: ") + e.what());
  }
  return m;
}

Mask full_mask(int rows, int cols) {
  Mask m(rows, cols);
  std::fill(m.data.begin(), m.data.end(), 1);
  return m;
}

SuvStats compute_suv(const Image& activity, const Mask& mask, const MetaInfo& meta) {
  require_same_shape(activity, mask, "compute_suv");
  if (!(meta.injected_dose_mbq > 0.0)) throw DomainError("injected dose must be positive");
  const double k = meta.weight_kg / meta.injected_dose_mbq;
  double mx = -std::numeric_limits<double>::infinity();
  double sum = 0.0;
  std::size_t count = 0;
  for (std::size_t i = 0; i < activity.size(); ++i) {
    if (!mask.data[i]) continue;
    const double v = activity.vec()[i] * k;
    mx = std::max(mx, v);
    sum += v;
    ++count;
  }
  if (count == 0) throw EmptyRegion("compute_suv: empty mask");
  return {mx, sum / static_cast<double>(count)};
}

Image to_suv(const Image& activity, const MetaInfo& meta) {
  return (meta.weight_kg / meta.injected_dose_mbq) * activity;
}

std::string render_prompt(const MetaInfo& m) {
  const std::string values[] = {trimmed(m.weight_kg, 1), trimmed(m.height_m, 2),
                                fixed(m.injected_dose_mbq, 1), trimmed(m.drf, 1),
                                fixed(m.suv_max, 2), fixed(m.suv_mean, 2)};
  std::string out;
  for (int i = 0; i < 6; ++i) {
    out += kPrompt[i].literal;
    out += values[i];
  }
  out += kPromptEnd;
  return out;
}

MetaInfo parse_prompt(const std::string& text) {
  double values[6] = {};
  std::size_t pos = 0;
  for (int i = 0; i < 6; ++i) {
    const std::string lit = kPrompt[i].literal;
    if (text.compare(pos, lit.size(), lit) != 0) {
      std::size_t k = 0;
      while (pos + k < text.size() && k < lit.size() && text[pos + k] == lit[k]) ++k;
      throw ParseError(kPrompt[i].field, pos + k, "expected \"" + lit + "\"");
    }
    pos += lit.size();
    std::size_t end = pos;
    auto digit = [&](std::size_t k) {
      return k < text.size() && std::isdigit(static_cast<unsigned char>(text[k]));
    };
    while (digit(end)) ++end;
    if (end > pos && end < text.size() && text[end] == '.' && digit(end + 1)) {
      ++end;
      while (digit(end)) ++end;
    }
    if (end == pos) throw ParseError(kPrompt[i].field, pos, "expected a number");
    const auto res = std::from_chars(text.data() + pos, text.data() + end, values[i]);
    if (res.ec != std::errc() || res.ptr != text.data() + end) {
      throw ParseError(kPrompt[i].field, pos, "malformed number");
    }
    pos = end;
  }
  if (text.compare(pos, std::string::npos, kPromptEnd) != 0) {
    throw ParseError("suv_mean", pos, "expected terminating \".\"");
  }
  MetaInfo m;
  m.weight_kg = values[0];
  m.height_m = values[1];
  m.injected_dose_mbq = values[2];
  m.drf = values[3];
  m.suv_max = values[4];
  m.suv_mean = values[5];
  return m;
}

MetaInfo quantize(const MetaInfo& meta) { return parse_prompt(render_prompt(meta)); }

Acquisition simulate_acquisition_expected(const Phantom& p, const Geometry& g, double total_counts,
                                          double drf) {
  if (!(total_counts > 0.0)) throw InvalidArgument("total_counts must be positive");
  if (!(drf >= 1.0)) throw InvalidArgument("drf must be >= 1");
  Acquisition a;
  a.expected = radon(p.image, g);
  const double mass = a.expected.data.sum();
  a.counts_scale = mass > 0.0 ? total_counts / mass : 0.0;
  for (double& v : a.expected.data.vec()) v *= a.counts_scale;
  a.expected.data = round_to_float(a.expected.data);
  a.full = a.expected;
  a.low = thin_counts(a.expected, drf);
  return a;
}

Acquisition simulate_acquisition(const Phantom& p, const Geometry& g, double total_counts,
                                 double drf, std::uint64_t seed) {
  Acquisition a = simulate_acquisition_expected(p, g, total_counts, drf);
  Rng full_rng = make_rng(seed, "full");
  Rng low_rng = make_rng(seed, "low");
  a.full = poisson_realize(a.expected, full_rng);
  a.low = thin_counts(a.expected, drf, low_rng);
  return a;
}

MetaInfo draw_patient(Rng& rng, double drf) {
  MetaInfo m;
  m.weight_kg = std::clamp(70.0 + 15.0 * standard_normal(rng), 40.0, 130.0);
  m.height_m = std::clamp(1.70 + 0.006 * (m.weight_kg - 70.0) + 0.06 * standard_normal(rng), 1.45, 2.05);
  m.injected_dose_mbq = m.weight_kg * (3.2 + 1.0 * uniform01(rng));
  m.drf = drf;
  m.suv_max = 0.0;
  m.suv_mean = 0.0;
  return m;
}

Case generate_case(std::uint64_t seed, const CaseConfig& cfg, const std::string& id,
                   bool with_acquisition) {
  if (cfg.phantom.image_size != cfg.geometry.image_size) {
    throw ConfigError("phantom image_size differs from geometry image_size");
  }
  Case c;
  c.id = id;
  c.seed = seed;
  Rng prng = make_rng(seed, "patient");
  MetaInfo m = draw_patient(prng, cfg.drf);

  // Body outline follows the patient's build.
  PhantomSpec spec = cfg.phantom;
  const double bmi = m.weight_kg / (m.height_m * m.height_m);
  const double f = std::clamp((bmi - 16.0) / 24.0, 0.0, 1.0);
  const double ax = 0.60 + 0.18 * f;
  const double ay = 0.46 + 0.16 * f;
  spec.body_ax = {ax, ax};
  spec.body_ay = {ay, ay};

  c.phantom = generate_phantom(seed, spec);
  m.suv_max = m.suv_mean = 1.0;
  m = quantize(m);
  c.phantom.image = round_to_float((m.injected_dose_mbq / m.weight_kg) * c.phantom.image);
  const SuvStats st = compute_suv(c.phantom.image, full_mask(spec.image_size, spec.image_size), m);
  m.suv_max = st.suv_max;
  m.suv_mean = st.suv_mean;
  c.meta = quantize(m);
  if (!with_acquisition) return c;
  c.acq = simulate_acquisition(c.phantom, cfg.geometry, cfg.kappa * c.phantom.image.sum(), cfg.drf,
                               substream_seed(seed, "acquisition"));
  return c;
}

void save_case(const std::filesystem::path& dir, const Case& c) {
  const auto d = dir / c.id;
  io::save_image(d / "phantom", c.phantom.image);
  io::save_mask(d / "lesion_mask", c.phantom.lesion_mask);
  io::save_mask(d / "liver_mask", c.phantom.liver_mask);
  io::save_mask(d / "body_mask", c.phantom.body_mask);
  save_sinogram(d / "expected", c.acq.expected);
  save_sinogram(d / "full", c.acq.full);
  save_sinogram(d / "low", c.acq.low);
  nlohmann::json ell = nlohmann::json::array();
  static const char* roles[] = {"body", "liver", "extra", "lesion"};
  for (const auto& e : c.phantom.ellipses) {
    ell.push_back({{"cx", e.cx}, {"cy", e.cy}, {"ax", e.ax}, {"ay", e.ay}, {"angle", e.angle},
                   {"activity", e.activity}, {"role", roles[static_cast<int>(e.role)]}});
  }
  nlohmann::json j{{"id", c.id},
                   {"seed", c.seed},
                   {"meta", c.meta.to_json()},
                   {"prompt", render_prompt(c.meta)},
                   {"counts_scale", c.acq.counts_scale},
                   {"ellipses", ell}};
  io::write_json(d / "meta.json", j);
}

Case load_case(const std::filesystem::path& dir, const std::string& id) {
  const auto d = dir / id;
  Case c;
  const auto j = io::read_json(d / "meta.json");
  c.id = j.at("id").get<std::string>();
  c.seed = j.at("seed").get<std::uint64_t>();
  c.meta = MetaInfo::from_json(j.at("meta"));
  c.acq.counts_scale = j.at("counts_scale").get<double>();
  for (const auto& e : j.at("ellipses")) {
    EllipseSpec s{e.at("cx"), e.at("cy"), e.at("ax"), e.at("ay"), e.at("angle"), e.at("activity")};
    const std::string role = e.at("role");
    s.role = role == "body"    ? EllipseRole::body
             : role == "liver" ? EllipseRole::liver
             : role == "extra" ? EllipseRole::extra
                               : EllipseRole::lesion;
    c.phantom.ellipses.push_back(s);
  }
  c.phantom.image = io::load_image(d / "phantom");
  c.phantom.lesion_mask = io::load_mask(d / "lesion_mask");
  c.phantom.liver_mask = io::load_mask(d / "liver_mask");
  c.phantom.body_mask = io::load_mask(d / "body_mask");
  c.acq.expected = load_sinogram(d / "expected");
  c.acq.full = load_sinogram(d / "full");
  c.acq.low = load_sinogram(d / "low");
  return c;
}

void write_manifest(const std::filesystem::path& path, const std::vector<ManifestRow>& rows) {
  std::ostringstream ss;
  ss << "id,paths,drf,seed\n";
  for (const auto& r : rows) {
    if (r.id.find(',') != std::string::npos || r.path.find(',') != std::string::npos) {
      throw InvalidArgument("manifest fields may not contain commas");
    }
    ss << r.id << ',' << r.path << ',' << trimmed(r.drf, 6) << ',' << r.seed << '\n';
  }
  io::write_text(path, ss.str());
}

std::vector<ManifestRow> read_manifest(const std::filesystem::path& path) {
  std::istringstream in(io::read_text(path));
  std::string line;
  std::vector<ManifestRow> rows;
  if (!std::getline(in, line) || line.rfind("id,paths,drf,seed", 0) != 0) {
    throw IoError(path.string() + ": missing manifest header");
  }
  int lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) f.push_back(cell);
    if (f.size() != 4) throw IoError(path.string() + ": bad row at line " + std::to_string(lineno));
    ManifestRow r;
    r.id = f[0];
    r.path = f[1];
    try {
      r.drf = std::stod(f[2]);
      r.seed = std::stoull(f[3]);
    } catch (const std::exception&) {
      throw IoError(path.string() + ": bad number at line " + std::to_string(lineno));
    }
    rows.push_back(r);
  }
  return rows;
}

}  // namespace xdiff
