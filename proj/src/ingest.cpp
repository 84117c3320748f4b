/*
 * Copyright 2026 The mitobench Authors.
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     https://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#include "mitobench/ingest.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <set>
#include <sstream>

#include "json.hpp"
#include "mitobench/errors.hpp"

namespace mitobench {

using nlohmann::json;

std::string_view to_string(Label label) {
  return label == Label::kMitoticFigure ? "mitotic_figure" : "hard_negative";
}

Label parse_label(std::string_view text) {
  if (text == "mitotic_figure") return Label::kMitoticFigure;
  if (text == "hard_negative") return Label::kHardNegative;
  throw ValidationError("unknown label '" + std::string(text) + "'");
}

namespace {

void add_count(LabelCounts& c, Label label) {
  if (label == Label::kMitoticFigure) {
    ++c.mitotic_figures;
  } else {
    ++c.hard_negatives;
  }
}

bool in_bounds(const AnnotationRecord& r, const ImageInfo& info) {
  return r.x >= 0.0 && r.y >= 0.0 && r.x < info.width && r.y < info.height;
}

json record_to_json(const AnnotationRecord& r) {
  return json{{"annotation_id", r.annotation_id}, {"case_id", r.case_id},   {"domain", r.domain},
              {"image_ref", r.image_ref},         {"x", r.x},               {"y", r.y},
              {"label", to_string(r.label)},      {"schema_version", DatasetManifest::kSchemaVersion}};
}

AnnotationRecord record_from_json(const json& j) {
  const int version = j.at("schema_version").get<int>();
  if (version != DatasetManifest::kSchemaVersion) {
    throw ValidationError("unsupported manifest schema_version " + std::to_string(version));
  }
  AnnotationRecord r;
  r.annotation_id = j.at("annotation_id").get<std::string>();
  r.case_id = j.at("case_id").get<std::string>();
  r.domain = j.at("domain").get<std::string>();
  r.image_ref = j.at("image_ref").get<std::string>();
  r.x = j.at("x").get<double>();
  r.y = j.at("y").get<double>();
  r.label = parse_label(j.at("label").get<std::string>());
  return r;
}

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> fields;
  std::string cur;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        cur += '"';
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        cur += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      fields.push_back(std::move(cur));
      cur.clear();
    } else if (c != '\r') {
      cur += c;
    }
  }
  fields.push_back(std::move(cur));
  return fields;
}

std::string json_scalar_to_string(const json& v) {
  if (v.is_string()) return v.get<std::string>();
  if (v.is_number_integer()) return std::to_string(v.get<long long>());
  return v.dump();
}

struct DomainResolver {
  std::string field;
  std::map<std::string, std::string> value_map;
  struct Range {
    long long from, to;
    std::string domain;
  };
  std::vector<Range> id_ranges;
  std::string fallback;

  explicit DomainResolver(const json& mapping) {
    field = mapping.value("domain_field", "");
    if (mapping.contains("domain_map")) value_map = mapping.at("domain_map").get<std::map<std::string, std::string>>();
    if (mapping.contains("domain_by_image_id")) {
      for (const auto& r : mapping.at("domain_by_image_id")) {
        id_ranges.push_back({r.at("from").get<long long>(), r.at("to").get<long long>(), r.at("domain").get<std::string>()});
      }
    }
    fallback = mapping.value("default_domain", "");
  }

  std::string resolve(const std::string& field_value, std::optional<long long> image_id) const {
    if (!field_value.empty()) {
      auto it = value_map.find(field_value);
      return it == value_map.end() ? field_value : it->second;
    }
    if (image_id) {
      for (const auto& r : id_ranges) {
        if (*image_id >= r.from && *image_id <= r.to) return r.domain;
      }
    }
    if (fallback.empty()) throw ValidationError("cannot resolve a domain for image (set default_domain)");
    return fallback;
  }
};

Label map_category(const std::map<std::string, std::string>& categories, const std::string& key) {
  auto it = categories.find(key);
  if (it == categories.end()) throw ValidationError("unmapped category '" + key + "'");
  return parse_label(it->second);
}

std::string stem_of(const std::string& file_name) { return std::filesystem::path(file_name).stem().string(); }

void finish_import(ImportResult& result) {
  auto& m = result.manifest;
  std::vector<AnnotationRecord> kept;
  std::set<std::string> ids;
  for (auto& r : m.records) {
    if (!ids.insert(r.annotation_id).second) {
      throw ValidationError("duplicate annotation_id '" + r.annotation_id + "'");
    }
    if (r.case_id.empty()) {
      result.report.quarantined.push_back({r.annotation_id, "empty case_id"});
      continue;
    }
    auto info = m.images.find(r.image_ref);
    if (info == m.images.end()) {
      result.report.quarantined.push_back({r.annotation_id, "unknown image '" + r.image_ref + "'"});
      continue;
    }
    if (!in_bounds(r, info->second)) {
      std::ostringstream why;
      why << "coordinate (" << r.x << ", " << r.y << ") outside " << info->second.width << "x"
          << info->second.height << " image";
      result.report.quarantined.push_back({r.annotation_id, why.str()});
      continue;
    }
    kept.push_back(std::move(r));
  }
  m.records = std::move(kept);
  result.report.totals = m.counts();
  result.report.by_domain = m.counts_by_domain();
  result.report.by_case = m.counts_by_case();
  result.report.images = m.images.size();
}

ImportResult import_coco(const std::filesystem::path& source, const json& mapping, const ImageStore* store) {
  std::ifstream in(source);
  if (!in) throw IoError("cannot open '" + source.string() + "'");
  const json doc = json::parse(in);

  const auto categories_by_name = mapping.at("categories").get<std::map<std::string, std::string>>();
  std::map<long long, std::string> category_names;
  for (const auto& c : doc.value("categories", json::array())) {
    category_names[c.at("id").get<long long>()] = c.value("name", std::to_string(c.at("id").get<long long>()));
  }
  const std::string case_field = mapping.value("case_field", "file_name");
  const std::string bbox_format = mapping.value("bbox_format", "xyxy");
  const DomainResolver domains(mapping);

  ImportResult result;
  result.manifest.name = mapping.value("name", stem_of(source.string()));
  result.manifest.image_root = mapping.value("image_root", "");

  struct ImageEntry {
    std::string ref, case_id, domain;
  };
  std::map<long long, ImageEntry> images;
  for (const auto& img : doc.at("images")) {
    const long long id = img.at("id").get<long long>();
    ImageEntry e;
    e.ref = img.at("file_name").get<std::string>();
    if (case_field == "file_name") {
      e.case_id = stem_of(e.ref);
    } else {
      e.case_id = json_scalar_to_string(img.at(case_field));
    }
    const std::string fv = domains.field.empty() || !img.contains(domains.field)
                               ? std::string()
                               : json_scalar_to_string(img.at(domains.field));
    e.domain = domains.resolve(fv, id);
    ImageInfo info;
    if (img.contains("width") && img.contains("height")) {
      info = {img.at("width").get<int>(), img.at("height").get<int>()};
    } else if (store) {
      info = store->info(e.ref);
    } else {
      throw ValidationError("image '" + e.ref + "' lacks dimensions and no image store was given");
    }
    result.manifest.images[e.ref] = info;
    images.emplace(id, std::move(e));
  }

  for (const auto& a : doc.at("annotations")) {
    AnnotationRecord r;
    r.annotation_id = json_scalar_to_string(a.at("id"));
    const long long image_id = a.at("image_id").get<long long>();
    auto img = images.find(image_id);
    if (img == images.end()) {
      result.report.quarantined.push_back({r.annotation_id, "unknown image id " + std::to_string(image_id)});
      continue;
    }
    const long long cat = a.at("category_id").get<long long>();
    auto name = category_names.find(cat);
    const std::string key = name == category_names.end() ? std::to_string(cat) : name->second;
    auto by_name = categories_by_name.find(key);
    r.label = by_name != categories_by_name.end() ? parse_label(by_name->second)
                                                  : map_category(categories_by_name, std::to_string(cat));
    if (a.contains("bbox")) {
      const auto b = a.at("bbox").get<std::vector<double>>();
      if (b.size() != 4) throw ValidationError("annotation " + r.annotation_id + ": bbox must have 4 values");
      if (bbox_format == "xywh") {
        r.x = b[0] + b[2] / 2.0;
        r.y = b[1] + b[3] / 2.0;
      } else {
        r.x = (b[0] + b[2]) / 2.0;
        r.y = (b[1] + b[3]) / 2.0;
      }
    } else {
      r.x = a.at("x").get<double>();
      r.y = a.at("y").get<double>();
    }
    r.case_id = img->second.case_id;
    r.domain = img->second.domain;
    r.image_ref = img->second.ref;
    result.manifest.records.push_back(std::move(r));
  }
  finish_import(result);
  return result;
}

ImportResult import_csv(const std::filesystem::path& source, const json& mapping, const ImageStore* store) {
  std::ifstream in(source);
  if (!in) throw IoError("cannot open '" + source.string() + "'");
  const auto columns = mapping.at("columns").get<std::map<std::string, std::string>>();
  const auto labels = mapping.at("labels").get<std::map<std::string, std::string>>();
  const DomainResolver domains(mapping);

  std::string line;
  if (!std::getline(in, line)) throw ValidationError("csv source '" + source.string() + "' is empty");
  const auto header = split_csv_line(line);
  std::map<std::string, std::size_t> index;
  for (std::size_t i = 0; i < header.size(); ++i) index[header[i]] = i;
  auto column = [&](const std::string& field) -> std::optional<std::size_t> {
    auto c = columns.find(field);
    if (c == columns.end()) return std::nullopt;
    auto it = index.find(c->second);
    if (it == index.end()) throw ValidationError("csv lacks mapped column '" + c->second + "'");
    return it->second;
  };
  const auto col_id = column("annotation_id");
  const auto col_case = column("case_id");
  const auto col_domain = column("domain");
  const auto col_image = column("image_ref");
  const auto col_x = column("x");
  const auto col_y = column("y");
  const auto col_label = column("label");
  const auto col_w = column("width");
  const auto col_h = column("height");
  if (!col_id || !col_image || !col_x || !col_y || !col_label) {
    throw ValidationError("csv mapping needs annotation_id, image_ref, x, y and label columns");
  }

  ImportResult result;
  result.manifest.name = mapping.value("name", stem_of(source.string()));
  result.manifest.image_root = mapping.value("image_root", "");
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line == "\r") continue;
    const auto f = split_csv_line(line);
    auto get = [&](std::optional<std::size_t> c) -> std::string {
      if (!c) return {};
      if (*c >= f.size()) throw ValidationError("csv line " + std::to_string(line_no) + " has too few fields");
      return f[*c];
    };
    AnnotationRecord r;
    r.annotation_id = get(col_id);
    r.image_ref = get(col_image);
    r.case_id = col_case ? get(col_case) : stem_of(r.image_ref);
    r.domain = domains.resolve(get(col_domain), std::nullopt);
    r.x = std::stod(get(col_x));
    r.y = std::stod(get(col_y));
    r.label = map_category(labels, get(col_label));
    if (!result.manifest.images.contains(r.image_ref)) {
      ImageInfo info;
      if (col_w && col_h) {
        info = {std::stoi(get(col_w)), std::stoi(get(col_h))};
      } else if (store) {
        info = store->info(r.image_ref);
      } else {
        throw ValidationError("image '" + r.image_ref + "' lacks dimensions and no image store was given");
      }
      result.manifest.images[r.image_ref] = info;
    }
    result.manifest.records.push_back(std::move(r));
  }
  finish_import(result);
  return result;
}

}  // namespace

LabelCounts DatasetManifest::counts() const {
  LabelCounts c;
  for (const auto& r : records) add_count(c, r.label);
  return c;
}

std::map<std::string, LabelCounts> DatasetManifest::counts_by_domain() const {
  std::map<std::string, LabelCounts> out;
  for (const auto& r : records) add_count(out[r.domain], r.label);
  return out;
}

std::map<std::string, LabelCounts> DatasetManifest::counts_by_case() const {
  std::map<std::string, LabelCounts> out;
  for (const auto& r : records) add_count(out[r.case_id], r.label);
  return out;
}

std::vector<std::string> DatasetManifest::cases() const {
  std::set<std::string> s;
  for (const auto& r : records) s.insert(r.case_id);
  return {s.begin(), s.end()};
}

std::vector<std::string> DatasetManifest::domains() const {
  std::set<std::string> s;
  for (const auto& r : records) s.insert(r.domain);
  return {s.begin(), s.end()};
}

const AnnotationRecord& DatasetManifest::record(std::string_view annotation_id) const {
  for (const auto& r : records) {
    if (r.annotation_id == annotation_id) return r;
  }
  throw ValidationError("unknown annotation '" + std::string(annotation_id) + "'");
}

std::vector<std::string> DatasetManifest::validate() const {
  std::vector<std::string> errors;
  std::set<std::string> ids;
  for (const auto& r : records) {
    if (!ids.insert(r.annotation_id).second) errors.push_back("duplicate annotation_id '" + r.annotation_id + "'");
    if (r.case_id.empty()) errors.push_back("annotation '" + r.annotation_id + "' has an empty case_id");
    auto it = images.find(r.image_ref);
    if (it == images.end()) {
      errors.push_back("annotation '" + r.annotation_id + "' references unknown image '" + r.image_ref + "'");
    } else if (!in_bounds(r, it->second)) {
      errors.push_back("annotation '" + r.annotation_id + "' lies outside its image");
    }
  }
  return errors;
}

std::filesystem::path image_table_path(const std::filesystem::path& manifest_path) {
  auto p = manifest_path;
  p += ".images.jsonl";
  return p;
}

void write_manifest(const DatasetManifest& manifest, const std::filesystem::path& path) {
  {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot write manifest '" + path.string() + "'");
    for (const auto& r : manifest.records) out << record_to_json(r).dump() << '\n';
  }
  std::ofstream out(image_table_path(path), std::ios::trunc);
  if (!out) throw IoError("cannot write image table for '" + path.string() + "'");
  out << json{{"name", manifest.name}, {"image_root", manifest.image_root},
              {"schema_version", DatasetManifest::kSchemaVersion}}
             .dump()
      << '\n';
  for (const auto& [ref, info] : manifest.images) {
    out << json{{"image_ref", ref}, {"width", info.width}, {"height", info.height}}.dump() << '\n';
  }
}

DatasetManifest read_manifest(const std::filesystem::path& path) {
  DatasetManifest m;
  std::ifstream in(path);
  if (!in) throw IoError("cannot open manifest '" + path.string() + "'");
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      m.records.push_back(record_from_json(json::parse(line)));
    } catch (const json::exception& e) {
      throw ValidationError("manifest line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  std::ifstream tin(image_table_path(path));
  if (tin) {
    bool first = true;
    while (std::getline(tin, line)) {
      if (line.empty()) continue;
      const json j = json::parse(line);
      if (first) {
        m.name = j.value("name", "");
        m.image_root = j.value("image_root", "");
        first = false;
        continue;
      }
      m.images[j.at("image_ref").get<std::string>()] = {j.at("width").get<int>(), j.at("height").get<int>()};
    }
  }
  return m;
}

// ---------------------------------------------------------------------------

void InMemoryImageStore::add(std::string image_ref, RgbImage image) {
  if (image.pixels.size() != static_cast<std::size_t>(image.width) * image.height * 3) {
    throw ShapeError("image '" + image_ref + "' payload does not match its dimensions");
  }
  images_[std::move(image_ref)] = std::move(image);
}

ImageInfo InMemoryImageStore::info(const std::string& image_ref) const {
  auto it = images_.find(image_ref);
  if (it == images_.end()) throw ValidationError("unknown image '" + image_ref + "'");
  return {it->second.width, it->second.height};
}

namespace {

RgbImage crop(const RgbImage& src, int x0, int y0, int w, int h, const std::string& ref) {
  if (x0 < 0 || y0 < 0 || w < 0 || h < 0 || x0 + w > src.width || y0 + h > src.height) {
    throw ValidationError("region outside image '" + ref + "'");
  }
  RgbImage out{w, h, std::vector<std::uint8_t>(static_cast<std::size_t>(w) * h * 3)};
  for (int y = 0; y < h; ++y) {
    const auto* row = src.pixels.data() + (static_cast<std::size_t>(y0 + y) * src.width + x0) * 3;
    std::copy(row, row + static_cast<std::size_t>(w) * 3, out.pixels.data() + static_cast<std::size_t>(y) * w * 3);
  }
  return out;
}

}  // namespace

RgbImage InMemoryImageStore::read_region(const std::string& image_ref, int x0, int y0, int width, int height) const {
  auto it = images_.find(image_ref);
  if (it == images_.end()) throw ValidationError("unknown image '" + image_ref + "'");
  return crop(it->second, x0, y0, width, height, image_ref);
}

void write_netpbm(const RgbImage& image, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write '" + path.string() + "'");
  out << "P6\n" << image.width << ' ' << image.height << "\n255\n";
  out.write(reinterpret_cast<const char*>(image.pixels.data()), static_cast<std::streamsize>(image.pixels.size()));
}

RgbImage read_netpbm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open image '" + path.string() + "'");
  auto token = [&]() {
    std::string t;
    char c;
    while (in.get(c)) {
      if (c == '#') {
        std::string skip;
        std::getline(in, skip);
      } else if (std::isspace(static_cast<unsigned char>(c))) {
        if (!t.empty()) break;
      } else {
        t += c;
      }
    }
    return t;
  };
  const std::string magic = token();
  if (magic != "P6" && magic != "P5") throw IoError("'" + path.string() + "' is not a binary netpbm image");
  RgbImage img;
  img.width = std::stoi(token());
  img.height = std::stoi(token());
  if (std::stoi(token()) != 255) throw IoError("only 8-bit netpbm images are supported");
  const int channels = magic == "P6" ? 3 : 1;
  std::vector<std::uint8_t> raw(static_cast<std::size_t>(img.width) * img.height * channels);
  in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  if (!in) throw IoError("'" + path.string() + "' is truncated");
  if (channels == 3) {
    img.pixels = std::move(raw);
  } else {
    img.pixels.resize(raw.size() * 3);
    for (std::size_t i = 0; i < raw.size(); ++i) img.pixels[3 * i] = img.pixels[3 * i + 1] = img.pixels[3 * i + 2] = raw[i];
  }
  return img;
}

std::shared_ptr<const RgbImage> NetpbmImageStore::load(const std::string& image_ref) const {
  std::lock_guard lock(mutex_);
  if (cached_ && cached_ref_ == image_ref) return cached_;
  cached_ = std::make_shared<const RgbImage>(read_netpbm(root_ / image_ref));
  cached_ref_ = image_ref;
  return cached_;
}

ImageInfo NetpbmImageStore::info(const std::string& image_ref) const {
  const auto img = load(image_ref);
  return {img->width, img->height};
}

RgbImage NetpbmImageStore::read_region(const std::string& image_ref, int x0, int y0, int width, int height) const {
  return crop(*load(image_ref), x0, y0, width, height, image_ref);
}

ImportResult import_manifest(const std::filesystem::path& source, const std::string& mapping_json,
                             const ImageStore* store) {
  json mapping;
  try {
    mapping = json::parse(mapping_json);
  } catch (const json::exception& e) {
    throw ValidationError(std::string("mapping config is not valid JSON: ") + e.what());
  }
  const std::string format = mapping.value("format", "coco");
  try {
    if (format == "coco") return import_coco(source, mapping, store);
    if (format == "csv") return import_csv(source, mapping, store);
  } catch (const json::exception& e) {
    throw ValidationError("import of '" + source.string() + "' failed: " + e.what());
  }
  throw ValidationError("unsupported source format '" + format + "'");
}

// ---------------------------------------------------------------------------

PatchSpec PatchSpec::for_backbone(const BackboneSpec& spec) {
  PatchSpec p;
  p.size = spec.input_size;
  p.norm_mean = spec.norm_mean;
  p.norm_std = spec.norm_std;
  return p;
}

WindowOrigin window_origin(double cx, double cy, const ImageInfo& image, int size) {
  if (size <= 0 || size % 2 != 0) throw ValidationError("patch size must be even and positive");
  if (image.width < size || image.height < size) {
    throw ValidationError("image of " + std::to_string(image.width) + "x" + std::to_string(image.height) +
                          " is smaller than the " + std::to_string(size) + " px patch");
  }
  const int half = size / 2;
  auto place = [&](double c, int extent) {
    const int start = static_cast<int>(std::floor(c)) - half;
    return std::clamp(start, 0, extent - size);
  };
  return {place(cx, image.width), place(cy, image.height)};
}

namespace {

RawPatch to_raw(const RgbImage& region) {
  RawPatch p;
  p.size = region.width;
  p.pixels.assign(region.pixels.begin(), region.pixels.end());
  return p;
}

}  // namespace

ExtractedPatch extract_patch(const ImageStore& store, const AnnotationRecord& record, const PatchSpec& spec) {
  const ImageInfo info = store.info(record.image_ref);
  if (!in_bounds(record, info)) {
    throw ValidationError("annotation '" + record.annotation_id + "' lies outside its image");
  }
  const WindowOrigin o = window_origin(record.x, record.y, info, spec.size);
  return {to_raw(store.read_region(record.image_ref, o.x0, o.y0, spec.size, spec.size)), o};
}

RandomPatch sample_random_patch(const ImageStore& store, const std::string& image_ref,
                                const std::vector<AnnotationRecord>& image_records, Rng& rng,
                                const PatchSpec& spec, const RandomPatchOptions& options) {
  const ImageInfo info = store.info(image_ref);
  if (info.width < spec.size || info.height < spec.size) {
    throw ValidationError("image '" + image_ref + "' is smaller than the patch size");
  }
  std::vector<std::pair<double, double>> figures;
  for (const auto& r : image_records) {
    if (r.image_ref == image_ref && r.label == Label::kMitoticFigure) figures.emplace_back(r.x, r.y);
  }
  const int half = spec.size / 2;
  auto clearance = [&](double cx, double cy) {
    double best = std::numeric_limits<double>::infinity();
    for (const auto& [fx, fy] : figures) best = std::min(best, std::hypot(cx - fx, cy - fy));
    return best;
  };

  RandomPatch out;
  WindowOrigin best_origin;
  double best_clearance = -1.0;
  bool accepted = false;
  const int tries = std::max(1, options.max_tries);
  for (int t = 0; t < tries; ++t) {
    const WindowOrigin o{static_cast<int>(uniform_index(rng, static_cast<std::uint64_t>(info.width - spec.size + 1))),
                         static_cast<int>(uniform_index(rng, static_cast<std::uint64_t>(info.height - spec.size + 1)))};
    const double c = clearance(o.x0 + half, o.y0 + half);
    out.tries = t + 1;
    if (c > best_clearance) {
      best_clearance = c;
      best_origin = o;
    }
    if (c >= options.exclusion_radius) {
      accepted = true;
      break;
    }
  }
  out.relaxed = !accepted;
  out.origin = best_origin;
  out.patch = to_raw(store.read_region(image_ref, best_origin.x0, best_origin.y0, spec.size, spec.size));
  out.record.annotation_id = "random:" + image_ref + ":" + std::to_string(best_origin.x0) + ":" +
                             std::to_string(best_origin.y0);
  out.record.image_ref = image_ref;
  out.record.x = best_origin.x0 + half;
  out.record.y = best_origin.y0 + half;
  out.record.label = Label::kHardNegative;
  if (!image_records.empty()) {
    out.record.case_id = image_records.front().case_id;
    out.record.domain = image_records.front().domain;
  }
  return out;
}

std::vector<float> normalize(const RawPatch& patch, const PatchSpec& spec) {
  const int s = patch.size;
  std::vector<float> out(static_cast<std::size_t>(3) * s * s);
  for (int c = 0; c < 3; ++c) {
    if (!(spec.norm_std[c] > 0.0)) throw ValidationError("normalization std must be positive");
    const double mean = spec.norm_mean[c];
    const double inv_std = 1.0 / spec.norm_std[c];
    float* plane = out.data() + static_cast<std::size_t>(c) * s * s;
    for (int y = 0; y < s; ++y) {
      for (int x = 0; x < s; ++x) {
        plane[static_cast<std::size_t>(y) * s + x] =
            static_cast<float>((patch.at(x, y, c) / 255.0 - mean) * inv_std);
      }
    }
  }
  return out;
}

RawPatch denormalize(const std::vector<float>& chw, int size, const PatchSpec& spec) {
  RawPatch p{size, std::vector<float>(static_cast<std::size_t>(3) * size * size)};
  for (int c = 0; c < 3; ++c) {
    const float* plane = chw.data() + static_cast<std::size_t>(c) * size * size;
    for (int y = 0; y < size; ++y) {
      for (int x = 0; x < size; ++x) {
        p.at(x, y, c) = static_cast<float>((plane[static_cast<std::size_t>(y) * size + x] * spec.norm_std[c] +
                                            spec.norm_mean[c]) * 255.0);
      }
    }
  }
  return p;
}

}  // namespace mitobench
