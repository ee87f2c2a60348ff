#include "volseq/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <exception>
#include <fstream>
#include <map>
#include <mutex>
#include <numbers>
#include <set>
#include <sstream>
#include <thread>

#include "volseq/random.hpp"

namespace volseq {

namespace fs = std::filesystem;

Extents parse_extents(const std::string& text) {
  Extents e{};
  std::size_t axis = 0;
  std::string part;
  std::istringstream is(text);
  while (std::getline(is, part, 'x')) {
    if (axis >= 3 || part.empty() || part.find_first_not_of("0123456789") != std::string::npos) {
      throw Error(ErrorKind::Config, "shape must look like D1xD2xD3, got '" + text + "'");
    }
    e[axis++] = std::stoul(part);
  }
  if (axis != 3 || e[0] == 0 || e[1] == 0 || e[2] == 0) {
    throw Error(ErrorKind::Config, "shape must look like D1xD2xD3 with positive extents, got '" + text + "'");
  }
  return e;
}

std::string extents_string(const Extents& e) {
  return std::to_string(e[0]) + "x" + std::to_string(e[1]) + "x" + std::to_string(e[2]);
}

// ---------------------------------------------------------------- resampling

double trilinear_sample(const Tensor& grid, double x, double y, double z) {
  const std::size_t n[3] = {grid.dim(0), grid.dim(1), grid.dim(2)};
  const double c[3] = {x, y, z};
  constexpr double kSlack = 1e-9;
  std::size_t lo[3], hi[3];
  double f[3];
  for (int a = 0; a < 3; ++a) {
    const double top = static_cast<double>(n[a] - 1);
    if (!(c[a] >= -kSlack && c[a] <= top + kSlack)) return 0.0;
    const double v = std::clamp(c[a], 0.0, top);
    const double fl = std::floor(v);
    lo[a] = static_cast<std::size_t>(fl);
    hi[a] = std::min(lo[a] + 1, n[a] - 1);
    f[a] = v - fl;
  }
  auto at = [&](std::size_t i, std::size_t j, std::size_t k) { return grid[(i * n[1] + j) * n[2] + k]; };
  auto lerp = [](double a, double b, double t) { return a * (1.0 - t) + b * t; };
  const double c00 = lerp(at(lo[0], lo[1], lo[2]), at(hi[0], lo[1], lo[2]), f[0]);
  const double c01 = lerp(at(lo[0], lo[1], hi[2]), at(hi[0], lo[1], hi[2]), f[0]);
  const double c10 = lerp(at(lo[0], hi[1], lo[2]), at(hi[0], hi[1], lo[2]), f[0]);
  const double c11 = lerp(at(lo[0], hi[1], hi[2]), at(hi[0], hi[1], hi[2]), f[0]);
  const double c0 = lerp(c00, c10, f[1]);
  const double c1 = lerp(c01, c11, f[1]);
  return lerp(c0, c1, f[2]);
}

Tensor trilinear_resize(const Tensor& grid, const Extents& target) {
  if (grid.rank() != 3) throw Error(ErrorKind::Shape, "resize expects a rank-3 grid");
  for (auto e : target) {
    if (e == 0) throw Error(ErrorKind::Shape, "resize target must be positive");
  }
  const std::size_t n[3] = {grid.dim(0), grid.dim(1), grid.dim(2)};
  if (n[0] == target[0] && n[1] == target[1] && n[2] == target[2]) return grid;
  auto coord = [&](int a, std::size_t o) {
    if (target[a] == 1) return 0.5 * static_cast<double>(n[a] - 1);
    return static_cast<double>(o) * static_cast<double>(n[a] - 1) / static_cast<double>(target[a] - 1);
  };
  Tensor out({target[0], target[1], target[2]});
  std::size_t idx = 0;
  for (std::size_t i = 0; i < target[0]; ++i) {
    for (std::size_t j = 0; j < target[1]; ++j) {
      for (std::size_t k = 0; k < target[2]; ++k) out[idx++] = trilinear_sample(grid, coord(0, i), coord(1, j), coord(2, k));
    }
  }
  return out;
}

Tensor preprocess_volume(const Volume& v, const Extents& target, const Volume* mask) {
  if (v.grid.rank() != 3) throw Error(ErrorKind::Shape, "volume grid must be rank 3");
  Tensor grid = v.grid;
  if (mask) {
    if (mask->grid.shape() != grid.shape()) {
      throw Error(ErrorKind::Shape, "mask grid " + shape_string(mask->grid.shape()) + " does not match volume " +
                                        shape_string(grid.shape()));
    }
    for (std::size_t i = 0; i < grid.size(); ++i) grid[i] *= mask->grid[i];
  }
  grid = trilinear_resize(grid, target);
  const auto [lo, hi] = std::minmax_element(grid.data().begin(), grid.data().end());
  const double mn = *lo, mx = *hi;
  Tensor out({target[0], target[1], target[2], 1});
  if (mx > mn) {
    const double range = mx - mn;
    for (std::size_t i = 0; i < grid.size(); ++i) out[i] = std::clamp((grid[i] - mn) / range, 0.0, 1.0);
  }
  return out;
}

std::array<double, 3> AffineTransform::apply(const std::array<double, 3>& p) const {
  std::array<double, 3> r{};
  for (int i = 0; i < 3; ++i) {
    r[i] = linear[i * 3] * p[0] + linear[i * 3 + 1] * p[1] + linear[i * 3 + 2] * p[2] + translation[i];
  }
  return r;
}

double AffineTransform::determinant() const {
  const auto& m = linear;
  return m[0] * (m[4] * m[8] - m[5] * m[7]) - m[1] * (m[3] * m[8] - m[5] * m[6]) + m[2] * (m[3] * m[7] - m[4] * m[6]);
}

AffineTransform AffineTransform::inverse() const {
  const double det = determinant();
  if (!std::isfinite(det) || std::abs(det) < 1e-12) {
    throw Error(ErrorKind::Transform, "transform '" + id + "' has a singular linear part");
  }
  const auto& m = linear;
  AffineTransform inv;
  inv.id = id + "^-1";
  inv.linear = {(m[4] * m[8] - m[5] * m[7]) / det, (m[2] * m[7] - m[1] * m[8]) / det, (m[1] * m[5] - m[2] * m[4]) / det,
                (m[5] * m[6] - m[3] * m[8]) / det, (m[0] * m[8] - m[2] * m[6]) / det, (m[2] * m[3] - m[0] * m[5]) / det,
                (m[3] * m[7] - m[4] * m[6]) / det, (m[1] * m[6] - m[0] * m[7]) / det, (m[0] * m[4] - m[1] * m[3]) / det};
  for (int i = 0; i < 3; ++i) {
    inv.translation[i] = -(inv.linear[i * 3] * translation[0] + inv.linear[i * 3 + 1] * translation[1] +
                           inv.linear[i * 3 + 2] * translation[2]);
  }
  return inv;
}

namespace {

AffineTransform as_transform(const std::array<double, 16>& a, const std::string& id) {
  AffineTransform t;
  t.id = id;
  for (int r = 0; r < 3; ++r) {
    for (int c = 0; c < 3; ++c) t.linear[r * 3 + c] = a[r * 4 + c];
    t.translation[r] = a[r * 4 + 3];
  }
  return t;
}

}  // namespace

Volume affine_resample(const Volume& v, const AffineTransform& t, const Extents& target_extents,
                       const std::array<double, 16>& target_affine, const std::array<double, 3>& target_spacing) {
  v.validate();
  const AffineTransform back = t.inverse();
  const AffineTransform world_to_src = as_transform(v.affine, "source").inverse();
  const AffineTransform out_to_world = as_transform(target_affine, "target");
  Volume out;
  out.grid = Tensor({target_extents[0], target_extents[1], target_extents[2]});
  out.affine = target_affine;
  out.spacing = target_spacing;
  std::size_t idx = 0;
  for (std::size_t i = 0; i < target_extents[0]; ++i) {
    for (std::size_t j = 0; j < target_extents[1]; ++j) {
      for (std::size_t k = 0; k < target_extents[2]; ++k) {
        const auto world = out_to_world.apply({double(i), double(j), double(k)});
        const auto src = world_to_src.apply(back.apply(world));
        out.grid[idx++] = trilinear_sample(v.grid, src[0], src[1], src[2]);
      }
    }
  }
  return out;
}

Volume affine_resample(const Volume& v, const AffineTransform& t) {
  return affine_resample(v, t, v.extents(), v.affine, v.spacing);
}

namespace {

AffineTransform rotation(int axis, double degrees, double scale, const std::string& id) {
  const double r = degrees * std::numbers::pi / 180.0;
  const double c = std::cos(r) * scale, s = std::sin(r) * scale;
  AffineTransform t;
  t.id = id;
  const int a = (axis + 1) % 3, b = (axis + 2) % 3;
  t.linear = {0, 0, 0, 0, 0, 0, 0, 0, 0};
  t.linear[axis * 3 + axis] = scale;
  t.linear[a * 3 + a] = c;
  t.linear[a * 3 + b] = -s;
  t.linear[b * 3 + a] = s;
  t.linear[b * 3 + b] = c;
  return t;
}

}  // namespace

const std::vector<AffineTransform>& builtin_templates() {
  static const std::vector<AffineTransform> templates = {
      rotation(2, 5.0, 1.0, "rot-z+5"),   rotation(2, -5.0, 1.0, "rot-z-5"),
      rotation(0, 4.0, 1.0, "rot-x+4"),   rotation(1, -4.0, 1.0, "rot-y-4"),
      rotation(2, 0.0, 1.06, "scale-106"), rotation(2, 3.0, 0.94, "scale-94-rot-z+3"),
  };
  return templates;
}

std::vector<AffineTransform> read_templates(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::Input, "cannot open templates '" + path.string() + "'");
  std::vector<AffineTransform> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    std::istringstream is(line);
    AffineTransform t;
    is >> t.id;
    for (auto& x : t.linear) is >> x;
    for (auto& x : t.translation) is >> x;
    std::string extra;
    if (is.fail() || (is >> extra)) {
      throw Error(ErrorKind::Format, path.string() + ":" + std::to_string(lineno) +
                                         ": expected id followed by 12 numbers (3x3 linear, translation)");
    }
    t.inverse();  // rejects singular transforms early
    out.push_back(std::move(t));
  }
  return out;
}

void write_templates(const std::vector<AffineTransform>& templates, const fs::path& path) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorKind::Write, "cannot write templates '" + path.string() + "'");
  out << "# id a11 a12 a13 a21 a22 a23 a31 a32 a33 tx ty tz (world mm)\n";
  char buf[32];
  for (const auto& t : templates) {
    out << t.id;
    for (double x : t.linear) {
      std::snprintf(buf, sizeof buf, " %.17g", x);
      out << buf;
    }
    for (double x : t.translation) {
      std::snprintf(buf, sizeof buf, " %.17g", x);
      out << buf;
    }
    out << '\n';
  }
  if (!out) throw Error(ErrorKind::Write, "failed writing '" + path.string() + "'");
}

// ---------------------------------------------------------------- manifests

Provenance Provenance::parse(const std::string& text) {
  Provenance p;
  if (text == "original") return p;
  auto number = [&](const std::string& s) -> std::size_t {
    if (s.empty() || s.find_first_not_of("0123456789") != std::string::npos) {
      throw Error(ErrorKind::Format, "bad provenance '" + text + "'");
    }
    return std::stoul(s);
  };
  std::istringstream is(text);
  std::string part;
  while (std::getline(is, part, '+')) {
    if (part.rfind("template:", 0) == 0 && !p.template_index && !p.flip_axis) {
      p.template_index = number(part.substr(9));
    } else if (part.rfind("flip:", 0) == 0 && !p.flip_axis) {
      p.flip_axis = number(part.substr(5));
      if (*p.flip_axis > 2) throw Error(ErrorKind::Format, "flip axis must be 0, 1 or 2 in '" + text + "'");
    } else {
      throw Error(ErrorKind::Format, "bad provenance '" + text + "'");
    }
  }
  if (p.original()) throw Error(ErrorKind::Format, "bad provenance '" + text + "'");
  return p;
}

std::string Provenance::str() const {
  if (original()) return "original";
  std::string s;
  if (template_index) s = "template:" + std::to_string(*template_index);
  if (flip_axis) s += (s.empty() ? "" : "+") + std::string("flip:") + std::to_string(*flip_axis);
  return s;
}

void DatasetManifest::validate() const {
  std::set<std::string> paths;
  for (const auto& r : rows) {
    if (r.patient_id.empty() || r.visit_code.empty() || r.path.empty()) {
      throw Error(ErrorKind::Input, "manifest row has an empty patient, visit or path");
    }
    if (r.label < 1 || r.label > 4) {
      throw Error(ErrorKind::Label, "class " + std::to_string(r.label) + " for " + r.patient_id + " is outside 1..4");
    }
    const auto prov = Provenance::parse(r.provenance);
    if (!prov.original() && r.source_patient.empty()) {
      throw Error(ErrorKind::Input, "generated row " + r.patient_id + " lacks a source patient");
    }
    if (!paths.insert(r.path).second) throw Error(ErrorKind::Input, "duplicate path '" + r.path + "' in manifest");
  }
}

namespace {

std::vector<std::string> split_fields(const std::string& line, char delim) {
  std::vector<std::string> out;
  std::string field;
  std::istringstream is(line);
  while (std::getline(is, field, delim)) out.push_back(field);
  if (!line.empty() && line.back() == delim) out.emplace_back();
  return out;
}

const char* kColumns[] = {"patient_id", "visit_code", "path", "class", "provenance", "source_patient",
                          "acquisition_date"};

}  // namespace

DatasetManifest read_manifest(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::Input, "cannot open manifest '" + path.string() + "'");
  DatasetManifest m;
  std::string line;
  std::size_t lineno = 0;
  std::map<std::string, std::size_t> col;
  char delim = '\t';
  auto where = [&] { return path.string() + ":" + std::to_string(lineno) + ": "; };
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (line[0] == '#') {
      const auto eq = line.find("seed=");
      if (eq != std::string::npos) {
        try {
          m.seed = std::stoull(line.substr(eq + 5));
        } catch (const std::exception&) {
          throw Error(ErrorKind::Format, where() + "bad seed comment");
        }
      }
      continue;
    }
    if (col.empty()) {
      delim = line.find('\t') != std::string::npos ? '\t' : ',';
      const auto names = split_fields(line, delim);
      for (std::size_t i = 0; i < names.size(); ++i) {
        if (!col.emplace(names[i], i).second) throw Error(ErrorKind::Format, where() + "duplicate column " + names[i]);
      }
      for (int i = 0; i < 5; ++i) {
        if (!col.count(kColumns[i])) {
          throw Error(ErrorKind::Format, where() + "header lacks required column '" + kColumns[i] + "'");
        }
      }
      continue;
    }
    const auto f = split_fields(line, delim);
    if (f.size() != col.size()) {
      throw Error(ErrorKind::Format, where() + "expected " + std::to_string(col.size()) + " fields, got " +
                                         std::to_string(f.size()));
    }
    ManifestRow r;
    r.patient_id = f[col["patient_id"]];
    r.visit_code = f[col["visit_code"]];
    r.path = f[col["path"]];
    const auto& cls = f[col["class"]];
    if (cls.size() != 1 || cls[0] < '0' || cls[0] > '9') {
      throw Error(ErrorKind::Label, where() + "class '" + cls + "' is not in 1..4");
    }
    r.label = cls[0] - '0';
    r.provenance = f[col["provenance"]];
    if (col.count("source_patient")) r.source_patient = f[col["source_patient"]];
    if (r.source_patient.empty()) r.source_patient = r.patient_id;
    if (col.count("acquisition_date")) r.acquisition_date = f[col["acquisition_date"]];
    m.rows.push_back(std::move(r));
  }
  if (col.empty()) throw Error(ErrorKind::Format, path.string() + ": manifest has no header row");
  m.validate();
  return m;
}

void write_manifest(const DatasetManifest& m, const fs::path& path) {
  m.validate();
  std::ofstream out(path);
  if (!out) throw Error(ErrorKind::Write, "cannot write manifest '" + path.string() + "'");
  out << "# seed=" << m.seed << '\n';
  for (int i = 0; i < 7; ++i) out << (i ? "\t" : "") << kColumns[i];
  out << '\n';
  for (const auto& r : m.rows) {
    const std::string fields[] = {r.patient_id, r.visit_code,     r.path,
                                  std::to_string(r.label), r.provenance, r.source_patient,
                                  r.acquisition_date};
    for (int i = 0; i < 7; ++i) {
      if (fields[i].find_first_of("\t\n\r") != std::string::npos) {
        throw Error(ErrorKind::Write, "manifest field contains a tab or newline: '" + fields[i] + "'");
      }
      out << (i ? "\t" : "") << fields[i];
    }
    out << '\n';
  }
  if (!out) throw Error(ErrorKind::Write, "failed writing '" + path.string() + "'");
}

int visit_rank(const std::string& code) {
  if (code == "BL") return 0;
  if (code.size() >= 2 && code[0] == 'V' && code.find_first_not_of("0123456789", 1) == std::string::npos &&
      code.size() <= 4) {
    return 1 + std::stoi(code.substr(1));
  }
  return 100000;
}

std::vector<int> ScanSequence::visit_labels() const {
  std::vector<int> out;
  for (const auto& v : visits) out.push_back(v.label);
  return out;
}

std::vector<ScanSequence> group_sequences(const DatasetManifest& m, std::size_t min_visits) {
  std::map<std::string, ScanSequence> by_patient;
  for (const auto& r : m.rows) {
    auto& s = by_patient[r.patient_id];
    if (s.visits.empty()) {
      s.patient_id = r.patient_id;
      s.lineage = r.source_patient.empty() ? r.patient_id : r.source_patient;
    } else if (s.lineage != (r.source_patient.empty() ? r.patient_id : r.source_patient)) {
      throw Error(ErrorKind::Input, "patient " + r.patient_id + " has rows with different source patients");
    }
    s.visits.push_back({r.visit_code, r.acquisition_date, r.path, r.label});
  }
  std::vector<ScanSequence> out;
  for (auto& [id, s] : by_patient) {
    const bool dated = std::all_of(s.visits.begin(), s.visits.end(),
                                   [](const Visit& v) { return !v.acquisition_date.empty(); });
    std::stable_sort(s.visits.begin(), s.visits.end(), [&](const Visit& a, const Visit& b) {
      if (dated && a.acquisition_date != b.acquisition_date) return a.acquisition_date < b.acquisition_date;
      const int ra = visit_rank(a.visit_code), rb = visit_rank(b.visit_code);
      if (ra != rb) return ra < rb;
      return a.visit_code < b.visit_code;
    });
    for (std::size_t i = 1; i < s.visits.size(); ++i) {
      if (s.visits[i].visit_code == s.visits[i - 1].visit_code ||
          (dated && s.visits[i].acquisition_date == s.visits[i - 1].acquisition_date)) {
        throw Error(ErrorKind::Input, "patient " + id + " has two visits at the same time point (" +
                                          s.visits[i].visit_code + ")");
      }
    }
    if (s.visits.size() < min_visits) {
      throw Error(ErrorKind::Input, "patient " + id + " has " + std::to_string(s.visits.size()) +
                                        " visit(s); sequences need at least " + std::to_string(min_visits));
    }
    s.label = s.visits.back().label;
    out.push_back(std::move(s));
  }
  return out;
}

std::array<std::size_t, 4> class_counts(const std::vector<ScanSequence>& sequences) {
  std::array<std::size_t, 4> c{};
  for (const auto& s : sequences) c.at(static_cast<std::size_t>(s.label - 1))++;
  return c;
}

// ---------------------------------------------------------------- augmentation

namespace {

std::string sanitize(const std::string& s) {
  std::string out;
  for (char ch : s) {
    const bool ok = std::isalnum(static_cast<unsigned char>(ch)) || ch == '-' || ch == '_' || ch == '.';
    out += ok ? ch : '_';
  }
  return out;
}

}  // namespace

DatasetManifest balance_dataset(const DatasetManifest& m, std::size_t n_templates, std::size_t target,
                                std::uint64_t seed) {
  m.validate();
  const auto sequences = group_sequences(m, 1);
  const auto counts = class_counts(sequences);
  const std::size_t largest = *std::max_element(counts.begin(), counts.end());
  if (target < largest) {
    throw Error(ErrorKind::Capacity, "target " + std::to_string(target) + " is below the largest class (" +
                                         std::to_string(largest) + " sequences)");
  }
  std::set<std::string> existing;
  for (const auto& s : sequences) existing.insert(s.patient_id);

  std::map<std::string, std::vector<const ManifestRow*>> rows_of;
  for (const auto& r : m.rows) rows_of[r.patient_id].push_back(&r);

  DatasetManifest out = m;
  for (int cls = 1; cls <= 4; ++cls) {
    const std::size_t deficit = target - counts[cls - 1];
    if (deficit == 0) continue;
    std::vector<std::string> patients;
    for (const auto& s : sequences) {
      if (s.label != cls) continue;
      const bool original = std::all_of(rows_of[s.patient_id].begin(), rows_of[s.patient_id].end(),
                                        [](const ManifestRow* r) { return r->provenance == "original"; });
      if (original) patients.push_back(s.patient_id);
    }
    Rng rng(derive_seed(seed, static_cast<std::uint64_t>(cls)));
    rng.shuffle(patients);

    std::vector<std::pair<std::string, Provenance>> candidates;
    const std::size_t np = patients.size();
    for (std::size_t j = 0; j < n_templates; ++j) {
      for (std::size_t i = 0; i < np; ++i) candidates.push_back({patients[i], {(i + j) % n_templates, std::nullopt}});
    }
    for (std::size_t a = 0; a < 3; ++a) {
      for (std::size_t i = 0; i < np; ++i) candidates.push_back({patients[i], {std::nullopt, a}});
    }
    for (std::size_t j = 0; j < n_templates; ++j) {
      for (std::size_t a = 0; a < 3; ++a) {
        for (std::size_t i = 0; i < np; ++i) candidates.push_back({patients[i], {(i + j) % n_templates, a}});
      }
    }

    std::size_t added = 0;
    for (const auto& [pid, prov] : candidates) {
      if (added == deficit) break;
      const std::string new_id = pid + "+" + prov.str();
      if (!existing.insert(new_id).second) continue;
      for (const ManifestRow* src : rows_of[pid]) {
        ManifestRow r = *src;
        r.patient_id = new_id;
        r.provenance = prov.str();
        r.source_patient = src->source_patient.empty() ? pid : src->source_patient;
        r.path = "augmented/" + sanitize(new_id) + "_" + sanitize(src->visit_code) + ".nii.gz";
        out.rows.push_back(std::move(r));
      }
      ++added;
    }
    if (added < deficit) {
      throw Error(ErrorKind::Capacity, "class " + std::to_string(cls) + " is short by " +
                                           std::to_string(deficit - added) + " sequences: " + std::to_string(np) +
                                           " original patients with " + std::to_string(n_templates) +
                                           " templates and 3 flip axes cannot reach " + std::to_string(target));
    }
  }
  out.validate();
  return out;
}

DatasetManifest rebase_paths(const DatasetManifest& m, const fs::path& from_dir, const fs::path& to_dir) {
  DatasetManifest out = m;
  const auto from = fs::weakly_canonical(fs::absolute(from_dir));
  const auto to = fs::weakly_canonical(fs::absolute(to_dir));
  if (from == to) return out;
  for (auto& r : out.rows) {
    const fs::path p(r.path);
    if (p.is_absolute()) continue;
    r.path = fs::relative(from / p, to).generic_string();
  }
  return out;
}

Volume augment_volume(const Volume& v, const Provenance& p, const std::vector<AffineTransform>& templates) {
  Volume out = v;
  if (p.template_index) {
    if (*p.template_index >= templates.size()) {
      throw Error(ErrorKind::Input, "provenance names template " + std::to_string(*p.template_index) + " but only " +
                                        std::to_string(templates.size()) + " are loaded");
    }
    out = affine_resample(v, templates[*p.template_index]);
  }
  if (p.flip_axis) out.grid = flip(out.grid, *p.flip_axis);
  return out;
}

void materialize_augmented(const DatasetManifest& out, const std::vector<AffineTransform>& templates,
                           const fs::path& source_dir, const fs::path& out_dir, std::size_t jobs) {
  std::map<std::pair<std::string, std::string>, const ManifestRow*> originals;
  for (const auto& r : out.rows) {
    if (r.provenance == "original") originals[{r.patient_id, r.visit_code}] = &r;
  }
  std::vector<const ManifestRow*> todo;
  for (const auto& r : out.rows) {
    if (r.provenance != "original") todo.push_back(&r);
  }
  std::set<fs::path> dirs;
  for (const auto* r : todo) dirs.insert((out_dir / r->path).parent_path());
  for (const auto& d : dirs) {
    std::error_code ec;
    fs::create_directories(d, ec);
    if (ec) throw Error(ErrorKind::Write, "cannot create '" + d.string() + "': " + ec.message());
  }
  parallel_for(todo.size(), jobs, [&](std::size_t i) {
    const ManifestRow& r = *todo[i];
    const auto it = originals.find({r.source_patient, r.visit_code});
    if (it == originals.end()) {
      throw Error(ErrorKind::Input, "generated row " + r.patient_id + "/" + r.visit_code +
                                        " has no original source row for " + r.source_patient);
    }
    const fs::path src = fs::path(it->second->path).is_absolute() ? fs::path(it->second->path)
                                                                   : source_dir / it->second->path;
    const Volume v = read_nifti(src);
    write_nifti(augment_volume(v, Provenance::parse(r.provenance), templates), out_dir / r.path);
  });
}

// ---------------------------------------------------------------- synthetic cohort

namespace {

struct StructureParams {
  double radius;     // fraction of the half-extent on each axis
  double intensity;
};

constexpr double kBaseRadius[4] = {0.70, 0.60, 0.50, 0.40};
constexpr double kBaseIntensity[4] = {1.00, 0.80, 0.60, 0.40};
constexpr double kShrinkPerVisit[4] = {0.00, 0.04, 0.08, 0.12};
constexpr double kNoiseSigma = 0.10;

StructureParams structure(int label, std::size_t visit) {
  const auto c = static_cast<std::size_t>(label - 1);
  const double shrink = std::max(0.2, 1.0 - kShrinkPerVisit[c] * static_cast<double>(visit));
  return {kBaseRadius[c] * shrink, kBaseIntensity[c] * (1.0 - 0.5 * (1.0 - shrink))};
}

void check_label(int label) {
  if (label < 1 || label > 4) throw Error(ErrorKind::Label, "class " + std::to_string(label) + " is outside 1..4");
}

}  // namespace

std::vector<bool> synthetic_structure_mask(int label, std::size_t visit, const Extents& shape) {
  check_label(label);
  const auto p = structure(label, visit);
  std::vector<bool> mask(shape[0] * shape[1] * shape[2]);
  std::size_t idx = 0;
  for (std::size_t i = 0; i < shape[0]; ++i) {
    for (std::size_t j = 0; j < shape[1]; ++j) {
      for (std::size_t k = 0; k < shape[2]; ++k) {
        const double u[3] = {(double(i) - 0.5 * double(shape[0] - 1)) / (0.5 * double(shape[0])),
                             (double(j) - 0.5 * double(shape[1] - 1)) / (0.5 * double(shape[1])),
                             (double(k) - 0.5 * double(shape[2] - 1)) / (0.5 * double(shape[2]))};
        const double r2 = (u[0] * u[0] + u[1] * u[1] + u[2] * u[2]) / (p.radius * p.radius);
        mask[idx++] = r2 <= 1.0;
      }
    }
  }
  return mask;
}

Volume synthetic_volume(int label, std::size_t visit, const Extents& shape, std::uint64_t patient_seed) {
  check_label(label);
  const auto p = structure(label, visit);
  // Per-patient traits are drawn from the patient stream so they stay fixed across visits.
  Rng traits(patient_seed);
  const double radius_jitter = traits.uniform(-0.05, 0.05);
  const double intensity_jitter = traits.uniform(-0.05, 0.05);
  double centre[3];
  for (double& c : centre) c = traits.uniform(-1.0, 1.0);
  const double aspect[3] = {traits.uniform(0.9, 1.1), traits.uniform(0.9, 1.1), traits.uniform(0.9, 1.1)};

  Rng noise(derive_seed(patient_seed, visit + 1));
  const double radius = p.radius * (1.0 + radius_jitter);
  const double intensity = p.intensity + intensity_jitter;

  Volume v;
  v.grid = Tensor({shape[0], shape[1], shape[2]});
  v.spacing = {1.0, 1.0, 1.0};
  v.affine = Volume::centred_affine(shape, v.spacing);
  std::size_t idx = 0;
  for (std::size_t i = 0; i < shape[0]; ++i) {
    for (std::size_t j = 0; j < shape[1]; ++j) {
      for (std::size_t k = 0; k < shape[2]; ++k) {
        const double pos[3] = {double(i), double(j), double(k)};
        double r2 = 0;
        for (int a = 0; a < 3; ++a) {
          const double u = (pos[a] - 0.5 * double(shape[a] - 1) - centre[a]) / (0.5 * double(shape[a]) * aspect[a]);
          r2 += u * u;
        }
        r2 /= radius * radius;
        const double inside = r2 <= 1.0 ? intensity : 0.0;
        v.grid[idx++] = inside + kNoiseSigma * noise.normal();
      }
    }
  }
  return v;
}

DatasetManifest generate_synthetic_cohort(const SynthConfig& cfg, const fs::path& out_dir, std::size_t jobs) {
  for (auto e : cfg.shape) {
    if (e < 16) throw Error(ErrorKind::Contract, "synthetic volumes need every extent >= 16, got " + extents_string(cfg.shape));
  }
  if (cfg.visits < 1) throw Error(ErrorKind::Contract, "synthetic patients need at least one visit");
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec || !fs::is_directory(out_dir)) {
    throw Error(ErrorKind::Write, "cannot create output directory '" + out_dir.string() + "'");
  }

  struct Job {
    int label;
    std::string patient;
    std::uint64_t seed;
  };
  std::vector<Job> patients;
  for (int c = 1; c <= 4; ++c) {
    for (std::size_t i = 0; i < cfg.per_class[c - 1]; ++i) {
      char id[32];
      std::snprintf(id, sizeof id, "c%d-p%04zu", c, i + 1);
      patients.push_back({c, id, derive_seed(cfg.seed, static_cast<std::uint64_t>(c) * 1000003ULL + i)});
    }
  }
  auto visit_code = [](std::size_t t) {
    if (t == 0) return std::string("BL");
    char b[24];
    std::snprintf(b, sizeof b, "V%02zu", t);
    return std::string(b);
  };
  const std::string ext = cfg.compress ? ".nii.gz" : ".nii";

  DatasetManifest m;
  m.seed = cfg.seed;
  for (const auto& p : patients) {
    for (std::size_t t = 0; t < cfg.visits; ++t) {
      ManifestRow r;
      r.patient_id = p.patient;
      r.visit_code = visit_code(t);
      r.path = p.patient + "_" + r.visit_code + ext;
      r.label = p.label;
      r.source_patient = p.patient;
      char date[32];
      std::snprintf(date, sizeof date, "%04zu-06-01", 2012 + t);
      r.acquisition_date = date;
      m.rows.push_back(std::move(r));
    }
  }
  parallel_for(patients.size(), jobs, [&](std::size_t i) {
    const auto& p = patients[i];
    for (std::size_t t = 0; t < cfg.visits; ++t) {
      write_nifti(synthetic_volume(p.label, t, cfg.shape, p.seed), out_dir / m.rows[i * cfg.visits + t].path,
                  cfg.datatype);
    }
  });
  write_manifest(m, out_dir / "manifest.tsv");
  return m;
}

// ---------------------------------------------------------------- loading

void parallel_for(std::size_t n, std::size_t jobs, const std::function<void(std::size_t)>& fn) {
  jobs = std::max<std::size_t>(1, std::min(jobs, n));
  if (jobs == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::exception_ptr first;
  std::mutex mu;
  std::vector<std::thread> threads;
  for (std::size_t w = 0; w < jobs; ++w) {
    const std::size_t lo = n * w / jobs, hi = n * (w + 1) / jobs;
    threads.emplace_back([&, lo, hi] {
      try {
        for (std::size_t i = lo; i < hi; ++i) fn(i);
      } catch (...) {
        std::lock_guard lock(mu);
        if (!first) first = std::current_exception();
      }
    });
  }
  for (auto& t : threads) t.join();
  if (first) std::rethrow_exception(first);
}

std::vector<LoadedSequence> load_sequences(const std::vector<ScanSequence>& sequences, const fs::path& base_dir,
                                           const Extents& target, std::size_t jobs) {
  std::vector<LoadedSequence> out(sequences.size());
  parallel_for(sequences.size(), jobs, [&](std::size_t i) {
    const auto& s = sequences[i];
    auto& o = out[i];
    o.patient_id = s.patient_id;
    o.lineage = s.lineage;
    o.label = static_cast<std::size_t>(s.label - 1);
    for (const auto& v : s.visits) {
      const fs::path p = fs::path(v.path).is_absolute() ? fs::path(v.path) : base_dir / v.path;
      o.volumes.push_back(preprocess_volume(read_nifti(p), target));
    }
  });
  return out;
}

}  // namespace volseq
