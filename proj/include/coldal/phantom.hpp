#pragma once

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "coldal/codec.hpp"
#include "coldal/grid.hpp"
#include "coldal/rng.hpp"

namespace coldal {

// Synthetic CT-like phantom: one connected "organ" made of overlapping
// ellipsoid lobes whose intensities sit inside the soft-tissue window,
// an optional hypodense "lesion" ellipsoid fully inside the organ, and
// Gaussian noise over everything. Ground truth doubles as the annotator.
//
// Classes: 0 = background, 1 = organ, 2 = lesion.

struct PhantomSpec {
  int extent = 32;
  int organ_count_min = 1;
  int organ_count_max = 3;
  float organ_mean = 125.0f;  // HU-like, inside the default 125/50 window
  float organ_std = 8.0f;
  float lesion_prob = 0.6f;
  float lesion_mean = 60.0f;  // hypodense: outside the window on purpose
  float lesion_std = 5.0f;
  float noise_std = 4.0f;
  std::uint64_t seed = 1;
};

inline void validate(const PhantomSpec& s) {
  if (s.extent < 16) throw std::invalid_argument("PhantomSpec: extent must be >= 16");
  if (s.organ_count_min < 1 || s.organ_count_max < s.organ_count_min)
    throw std::invalid_argument("PhantomSpec: bad organ count range");
  if (s.organ_std < 0 || s.lesion_std < 0 || s.noise_std < 0)
    throw std::invalid_argument("PhantomSpec: stds must be >= 0");
  if (!(s.lesion_prob >= 0.0f && s.lesion_prob <= 1.0f))
    throw std::invalid_argument("PhantomSpec: lesion_prob must be in [0,1]");
}

struct LabeledCase {
  Volume3D volume;
  LabelMap truth;
};

inline bool has_lesion(const LabeledCase& c) {
  for (std::uint32_t v : c.truth.data)
    if (v == 2) return true;
  return false;
}

namespace detail {

struct Ellipsoid {
  double cd, ch, cw;
  double rd, rh, rw;

  bool contains(int d, int h, int w) const {
    const double x = (d - cd) / rd, y = (h - ch) / rh, z = (w - cw) / rw;
    return x * x + y * y + z * z <= 1.0;
  }
};

}  // namespace detail

inline LabeledCase generate_case(const PhantomSpec& spec, std::uint64_t index) {
  validate(spec);
  const int n = spec.extent;
  const std::uint64_t case_key = derive_key(spec.seed, index);

  Rng shape_rng(derive_key(case_key, hash_str("shape")));
  const int lobes = spec.organ_count_min +
                    static_cast<int>(shape_rng.below(
                        spec.organ_count_max - spec.organ_count_min + 1));

  // First lobe near the center; later lobes centered inside an earlier one,
  // so the organ is a single connected component.
  std::vector<detail::Ellipsoid> organ;
  {
    detail::Ellipsoid e;
    e.cd = n / 2.0 + shape_rng.uniform(-n / 8.0, n / 8.0);
    e.ch = n / 2.0 + shape_rng.uniform(-n / 8.0, n / 8.0);
    e.cw = n / 2.0 + shape_rng.uniform(-n / 8.0, n / 8.0);
    e.rd = shape_rng.uniform(0.18, 0.28) * n;
    e.rh = shape_rng.uniform(0.18, 0.28) * n;
    e.rw = shape_rng.uniform(0.18, 0.28) * n;
    organ.push_back(e);
  }
  for (int l = 1; l < lobes; ++l) {
    const auto& parent = organ[shape_rng.below(organ.size())];
    detail::Ellipsoid e;
    e.cd = parent.cd + shape_rng.uniform(-0.7, 0.7) * parent.rd;
    e.ch = parent.ch + shape_rng.uniform(-0.7, 0.7) * parent.rh;
    e.cw = parent.cw + shape_rng.uniform(-0.7, 0.7) * parent.rw;
    e.rd = shape_rng.uniform(0.12, 0.22) * n;
    e.rh = shape_rng.uniform(0.12, 0.22) * n;
    e.rw = shape_rng.uniform(0.12, 0.22) * n;
    organ.push_back(e);
  }

  const bool lesion_present =
      unit_at(derive_key(case_key, hash_str("lesion_coin")), 0) <
      static_cast<double>(spec.lesion_prob);
  detail::Ellipsoid lesion{};
  if (lesion_present) {
    Rng lr(derive_key(case_key, hash_str("lesion_shape")));
    const auto& host = organ[lr.below(organ.size())];
    lesion.cd = host.cd + lr.uniform(-0.4, 0.4) * host.rd;
    lesion.ch = host.ch + lr.uniform(-0.4, 0.4) * host.rh;
    lesion.cw = host.cw + lr.uniform(-0.4, 0.4) * host.rw;
    lesion.rd = lr.uniform(0.06, 0.11) * n;
    lesion.rh = lr.uniform(0.06, 0.11) * n;
    lesion.rw = lr.uniform(0.06, 0.11) * n;
  }

  LabeledCase out;
  char name[32];
  std::snprintf(name, sizeof(name), "case_%04llu",
                static_cast<unsigned long long>(index));
  out.volume.id = name;
  out.volume.size = {n, n, n};
  out.volume.data.resize(static_cast<std::size_t>(out.volume.size.voxels()));
  out.truth.size = out.volume.size;
  out.truth.num_classes = 3;
  out.truth.data.assign(out.volume.data.size(), 0);

  const std::uint64_t organ_tex = derive_key(case_key, hash_str("organ_tex"));
  const std::uint64_t lesion_tex = derive_key(case_key, hash_str("lesion_tex"));
  const std::uint64_t noise_tex = derive_key(case_key, hash_str("noise"));

  std::int64_t vi = 0;
  for (int d = 0; d < n; ++d)
    for (int h = 0; h < n; ++h)
      for (int w = 0; w < n; ++w, ++vi) {
        bool in_organ = false;
        for (const auto& e : organ)
          if (e.contains(d, h, w)) {
            in_organ = true;
            break;
          }
        float base = 0.0f;
        if (in_organ) {
          // lesion voxels are carved strictly out of the organ region
          if (lesion_present && lesion.contains(d, h, w)) {
            Rng r(derive_key(lesion_tex, static_cast<std::uint64_t>(vi)));
            base = spec.lesion_mean + spec.lesion_std * static_cast<float>(r.normal());
            out.truth.data[static_cast<std::size_t>(vi)] = 2;
          } else {
            Rng r(derive_key(organ_tex, static_cast<std::uint64_t>(vi)));
            base = spec.organ_mean + spec.organ_std * static_cast<float>(r.normal());
            out.truth.data[static_cast<std::size_t>(vi)] = 1;
          }
        }
        Rng r(derive_key(noise_tex, static_cast<std::uint64_t>(vi)));
        out.volume.data[static_cast<std::size_t>(vi)] =
            base + spec.noise_std * static_cast<float>(r.normal());
      }
  return out;
}

// Train cases use indices [0, n_train); validation [n_train, n_train+n_val).
// The validation set is therefore fixed for a given spec no matter how the
// training pool is later consumed.
inline std::pair<std::vector<LabeledCase>, std::vector<LabeledCase>>
generate_dataset(const PhantomSpec& spec, int n_train, int n_val) {
  if (n_train < 1 || n_val < 1)
    throw std::invalid_argument("generate_dataset: n_train and n_val must be >= 1");
  std::pair<std::vector<LabeledCase>, std::vector<LabeledCase>> out;
  out.first.reserve(static_cast<std::size_t>(n_train));
  out.second.reserve(static_cast<std::size_t>(n_val));
  for (int i = 0; i < n_train; ++i)
    out.first.push_back(generate_case(spec, static_cast<std::uint64_t>(i)));
  for (int i = 0; i < n_val; ++i)
    out.second.push_back(
        generate_case(spec, static_cast<std::uint64_t>(n_train + i)));
  return out;
}

// --- dataset directory layout -------------------------------------------
//
//   <dir>/manifest.json
//   <dir>/vol/<id>.cal3d      raw volumes (kind 0)
//   <dir>/truth/<id>.cal3d    ground-truth labels (kind 1)

struct CaseEntry {
  std::string id;
  std::string volume_path;  // relative to the dataset dir
  std::string truth_path;
  bool lesion = false;
  std::string split;  // "train" | "val"
};

struct Manifest {
  int version = 1;
  PhantomSpec spec;
  std::vector<CaseEntry> cases;
};

inline void write_dataset(const std::filesystem::path& dir, const PhantomSpec& spec,
                          const std::vector<LabeledCase>& train,
                          const std::vector<LabeledCase>& val) {
  namespace fs = std::filesystem;
  fs::create_directories(dir / "vol");
  fs::create_directories(dir / "truth");

  nlohmann::json cases = nlohmann::json::array();
  auto emit = [&](const LabeledCase& c, const char* split) {
    const std::string vp = "vol/" + c.volume.id + ".cal3d";
    const std::string tp = "truth/" + c.volume.id + ".cal3d";
    write_volume(dir / vp, c.volume);
    write_label(dir / tp, c.truth);
    cases.push_back({{"id", c.volume.id},
                     {"volume", vp},
                     {"truth", tp},
                     {"lesion", has_lesion(c)},
                     {"split", split}});
  };
  for (const auto& c : train) emit(c, "train");
  for (const auto& c : val) emit(c, "val");

  nlohmann::json j;
  j["version"] = 1;
  j["spec"] = {{"extent", spec.extent},
               {"organ_count_min", spec.organ_count_min},
               {"organ_count_max", spec.organ_count_max},
               {"organ_mean", spec.organ_mean},
               {"organ_std", spec.organ_std},
               {"lesion_prob", spec.lesion_prob},
               {"lesion_mean", spec.lesion_mean},
               {"lesion_std", spec.lesion_std},
               {"noise_std", spec.noise_std},
               {"seed", spec.seed}};
  j["cases"] = cases;
  std::ofstream out(dir / "manifest.json", std::ios::trunc);
  if (!out) throw FormatError("cannot write manifest in " + dir.string());
  out << j.dump(2) << "\n";
}

inline Manifest read_manifest(const std::filesystem::path& dir) {
  std::ifstream in(dir / "manifest.json");
  if (!in) throw FormatError("cannot open manifest in " + dir.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("manifest parse error: ") + e.what());
  }
  Manifest m;
  m.version = j.value("version", 0);
  if (m.version != 1)
    throw VersionError("manifest: unsupported version " + std::to_string(m.version));
  const auto& s = j.at("spec");
  m.spec.extent = s.at("extent").get<int>();
  m.spec.organ_count_min = s.at("organ_count_min").get<int>();
  m.spec.organ_count_max = s.at("organ_count_max").get<int>();
  m.spec.organ_mean = s.at("organ_mean").get<float>();
  m.spec.organ_std = s.at("organ_std").get<float>();
  m.spec.lesion_prob = s.at("lesion_prob").get<float>();
  m.spec.lesion_mean = s.at("lesion_mean").get<float>();
  m.spec.lesion_std = s.at("lesion_std").get<float>();
  m.spec.noise_std = s.at("noise_std").get<float>();
  m.spec.seed = s.at("seed").get<std::uint64_t>();
  for (const auto& c : j.at("cases")) {
    CaseEntry e;
    e.id = c.at("id").get<std::string>();
    e.volume_path = c.at("volume").get<std::string>();
    e.truth_path = c.at("truth").get<std::string>();
    e.lesion = c.at("lesion").get<bool>();
    e.split = c.at("split").get<std::string>();
    m.cases.push_back(std::move(e));
  }
  return m;
}

struct DatasetCase {
  std::string id;
  Volume3D volume;  // raw intensities
  LabelMap truth;
  bool lesion = false;
};

struct Dataset {
  std::vector<DatasetCase> train;
  std::vector<DatasetCase> val;
};

inline Dataset load_dataset(const std::filesystem::path& dir) {
  const Manifest m = read_manifest(dir);
  Dataset ds;
  for (const auto& e : m.cases) {
    DatasetCase c;
    c.id = e.id;
    c.volume = read_volume(dir / e.volume_path);
    c.volume.id = e.id;
    c.truth = read_label(dir / e.truth_path);
    c.lesion = e.lesion;
    if (e.split == "train")
      ds.train.push_back(std::move(c));
    else if (e.split == "val")
      ds.val.push_back(std::move(c));
    else
      throw FormatError("manifest: unknown split '" + e.split + "'");
  }
  return ds;
}

}  // namespace coldal
