#include "stainforge/io.hpp"

#include <fstream>
#include <sstream>

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>

#include "stainforge/textio.hpp"

namespace stainforge::io {

void require_file(const fs::path& path) {
  if (!fs::exists(path)) throw UserError("file not found: " + path.string());
}

std::vector<std::string> PanelConfig::markers() const {
  std::vector<std::string> out;
  for (const auto& c : channels) {
    if (c != af_channel && c != empty_channel) out.push_back(c);
  }
  return out;
}

std::size_t PanelConfig::channel_index(const std::string& name) const {
  for (std::size_t i = 0; i < channels.size(); ++i) {
    if (channels[i] == name) return i;
  }
  throw UserError("channel '" + name + "' is not in the panel");
}

imgproc::AFParams PanelConfig::af_params(const std::string& marker) const {
  const auto it = af.find(marker);
  return it == af.end() ? imgproc::AFParams{} : it->second;
}

PanelConfig PanelConfig::from_json(const json& j) {
  PanelConfig p;
  if (!j.contains("channels") || !j["channels"].is_array() || j["channels"].empty()) {
    throw UserError("panel config needs a non-empty 'channels' array");
  }
  p.channels = j["channels"].get<std::vector<std::string>>();
  p.af_channel = j.value("af_channel", "");
  p.empty_channel = j.value("empty_channel", "");
  p.nuclear_channel = j.value("nuclear_channel", p.channels.front());
  for (const auto* name : {&p.af_channel, &p.empty_channel, &p.nuclear_channel}) {
    if (!name->empty()) p.channel_index(*name);
  }
  if (j.contains("af")) {
    for (const auto& [name, v] : j["af"].items()) {
      p.channel_index(name);
      imgproc::AFParams a{v.value("lambda", 0.0), v.value("b", 0.0)};
      if (!(a.lambda >= 0)) throw UserError("AF lambda for '" + name + "' must be >= 0");
      p.af[name] = a;
    }
  }
  if (j.contains("q999")) {
    for (const auto& [name, v] : j["q999"].items()) {
      p.channel_index(name);
      p.q999[name] = v.get<double>();
    }
  }
  if (j.contains("hierarchy")) {
    for (const auto& r : j["hierarchy"]) {
      p.hierarchy.push_back({r.at("child").get<std::string>(), r.at("parent").get<std::string>()});
    }
  }
  const auto base = j.value("log_base", std::string("2"));
  if (base == "2") {
    p.log_base = imgproc::LogBase::kTwo;
  } else if (base == "e" || base == "natural") {
    p.log_base = imgproc::LogBase::kNatural;
  } else {
    throw UserError("log_base must be \"2\" or \"e\"");
  }
  // Validates marker names and acyclicity up front.
  gating::Hierarchy::build(p.hierarchy, p.markers());
  return p;
}

ordered_json PanelConfig::to_json() const {
  ordered_json j;
  j["channels"] = channels;
  j["af_channel"] = af_channel;
  j["empty_channel"] = empty_channel;
  j["nuclear_channel"] = nuclear_channel;
  j["af"] = ordered_json::object();
  for (const auto& [name, a] : af) j["af"][name] = {{"lambda", a.lambda}, {"b", a.b}};
  j["q999"] = ordered_json::object();
  for (const auto& [name, q] : q999) j["q999"][name] = q;
  j["hierarchy"] = ordered_json::array();
  for (const auto& r : hierarchy) j["hierarchy"].push_back({{"child", r.child}, {"parent", r.parent}});
  j["log_base"] = log_base == imgproc::LogBase::kTwo ? "2" : "e";
  return j;
}

std::string PanelConfig::hash() const { return textio::hash_hex(to_json().dump()); }

PanelConfig load_panel(const fs::path& path) {
  require_file(path);
  try {
    return PanelConfig::from_json(json::parse(textio::read_file(path)));
  } catch (const json::exception& e) {
    throw UserError("invalid panel config " + path.string() + ": " + e.what());
  }
}

void save_panel(const fs::path& path, const PanelConfig& panel) {
  textio::write_file_atomic(path, panel.to_json().dump(2) + "\n");
}

TileRecord TileRecord::from_json(const json& j) {
  TileRecord r;
  try {
    r.slide_id = j.at("slide_id").get<std::string>();
    r.tile_id = j.at("tile_id").get<std::string>();
    r.x = j.value("x", 0);
    r.y = j.value("y", 0);
    r.mpp = j.value("mpp", 0.5);
    r.he_path = j.at("he_path").get<std::string>();
    r.mif_path = j.value("mif_path", "");
    r.split = j.value("split", "train");
    r.nuclei_path = j.value("nuclei_path", "");
    r.he_nuclei_path = j.value("he_nuclei_path", "");
  } catch (const json::exception& e) {
    throw UserError(std::string("invalid manifest record: ") + e.what());
  }
  if (!(r.mpp > 0)) throw UserError("manifest record " + r.tile_id + " has non-positive mpp");
  static const std::vector<std::string> known = {"slide_id", "tile_id", "x", "y", "mpp", "he_path",
                                                 "mif_path", "split", "nuclei_path", "he_nuclei_path"};
  for (const auto& [k, v] : j.items()) {
    if (std::find(known.begin(), known.end(), k) == known.end()) r.extra[k] = v;
  }
  return r;
}

ordered_json TileRecord::to_json() const {
  ordered_json j;
  j["slide_id"] = slide_id;
  j["tile_id"] = tile_id;
  j["x"] = x;
  j["y"] = y;
  j["mpp"] = mpp;
  j["he_path"] = he_path;
  j["mif_path"] = mif_path;
  j["split"] = split;
  if (!nuclei_path.empty()) j["nuclei_path"] = nuclei_path;
  if (!he_nuclei_path.empty()) j["he_nuclei_path"] = he_nuclei_path;
  for (const auto& [k, v] : extra.items()) j[k] = v;
  return j;
}

std::vector<TileRecord> load_manifest(const fs::path& path) {
  require_file(path);
  std::ifstream in(path);
  const fs::path base = path.parent_path();
  auto resolve = [&](std::string& p) {
    if (!p.empty() && fs::path(p).is_relative()) p = (base / p).lexically_normal().string();
  };
  std::vector<TileRecord> records;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      throw UserError(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
    auto r = TileRecord::from_json(j);
    resolve(r.he_path);
    resolve(r.mif_path);
    resolve(r.nuclei_path);
    resolve(r.he_nuclei_path);
    records.push_back(std::move(r));
  }
  return records;
}

void write_manifest(const fs::path& path, const std::vector<TileRecord>& records) {
  std::ostringstream out;
  for (const auto& r : records) out << r.to_json().dump() << '\n';
  textio::write_file_atomic(path, out.str());
}

RgbImage read_rgb(const fs::path& path, double mpp) {
  require_file(path);
  cv::Mat bgr = cv::imread(path.string(), cv::IMREAD_COLOR);
  if (bgr.empty()) throw UserError("cannot decode image " + path.string());
  RgbImage img(bgr.cols, bgr.rows, mpp);
  for (int y = 0; y < bgr.rows; ++y) {
    const auto* row = bgr.ptr<cv::Vec3b>(y);
    for (int x = 0; x < bgr.cols; ++x) {
      img.at(x, y, 0) = row[x][2];
      img.at(x, y, 1) = row[x][1];
      img.at(x, y, 2) = row[x][0];
    }
  }
  return img;
}

void write_rgb(const fs::path& path, const RgbImage& image) {
  cv::Mat bgr(image.height, image.width, CV_8UC3);
  for (int y = 0; y < image.height; ++y) {
    auto* row = bgr.ptr<cv::Vec3b>(y);
    for (int x = 0; x < image.width; ++x) {
      row[x] = cv::Vec3b(image.at(x, y, 2), image.at(x, y, 1), image.at(x, y, 0));
    }
  }
  if (!cv::imwrite(path.string(), bgr)) throw Error("cannot write " + path.string());
}

namespace {

ChannelImage from_mat(const cv::Mat& page, double mpp) {
  ChannelImage ch(page.cols, page.rows, mpp);
  cv::Mat as_double;
  page.convertTo(as_double, CV_64F);
  for (int y = 0; y < page.rows; ++y) {
    const auto* row = as_double.ptr<double>(y);
    for (int x = 0; x < page.cols; ++x) ch.at(x, y) = row[x];
  }
  return ch;
}

template <typename T>
cv::Mat to_mat(const ChannelImage& ch, int type, double lo, double hi) {
  cv::Mat m(ch.height, ch.width, type);
  for (int y = 0; y < ch.height; ++y) {
    auto* row = m.ptr<T>(y);
    for (int x = 0; x < ch.width; ++x) {
      double v = std::clamp(ch.at(x, y), lo, hi);
      if constexpr (std::is_integral_v<T>) v = std::round(v);
      row[x] = static_cast<T>(v);
    }
  }
  return m;
}

void write_pages(const fs::path& path, const std::vector<cv::Mat>& pages) {
  if (pages.empty()) throw Error("no channels to write");
  const bool ok = pages.size() == 1 ? cv::imwrite(path.string(), pages[0]) : cv::imwritemulti(path.string(), pages);
  if (!ok) throw Error("cannot write " + path.string());
}

}  // namespace

ChannelStack read_channels(const fs::path& path, double mpp) {
  require_file(path);
  std::vector<cv::Mat> pages;
  if (!cv::imreadmulti(path.string(), pages, cv::IMREAD_UNCHANGED) || pages.empty()) {
    throw UserError("cannot decode multichannel image " + path.string());
  }
  ChannelStack stack;
  for (const auto& page : pages) {
    if (page.channels() != 1) throw UserError(path.string() + ": expected single-component pages");
    stack.push_back(from_mat(page, mpp));
    if (!stack.back().same_shape(stack.front())) throw UserError(path.string() + ": pages differ in size");
  }
  return stack;
}

void write_channels_u16(const fs::path& path, const ChannelStack& channels) {
  std::vector<cv::Mat> pages;
  for (const auto& ch : channels) pages.push_back(to_mat<std::uint16_t>(ch, CV_16UC1, 0.0, 65535.0));
  write_pages(path, pages);
}

void write_channels_f32(const fs::path& path, const ChannelStack& channels) {
  std::vector<cv::Mat> pages;
  for (const auto& ch : channels) pages.push_back(to_mat<float>(ch, CV_32FC1, -3.4e38, 3.4e38));
  write_pages(path, pages);
}

InstanceMask read_mask(const fs::path& path, double mpp) {
  require_file(path);
  cv::Mat m = cv::imread(path.string(), cv::IMREAD_UNCHANGED);
  if (m.empty() || m.channels() != 1) throw UserError("cannot decode instance mask " + path.string());
  cv::Mat as_int;
  m.convertTo(as_int, CV_32S);
  InstanceMask mask(m.cols, m.rows, mpp);
  for (int y = 0; y < m.rows; ++y) {
    const auto* row = as_int.ptr<std::int32_t>(y);
    for (int x = 0; x < m.cols; ++x) {
      if (row[x] < 0) throw UserError(path.string() + ": negative label");
      mask.at(x, y) = row[x];
    }
  }
  return mask;
}

void write_mask(const fs::path& path, const InstanceMask& mask) {
  if (mask.max_label() > 65535) throw Error("instance ids above 65535 do not fit a 16-bit mask");
  cv::Mat m(mask.height, mask.width, CV_16UC1);
  for (int y = 0; y < mask.height; ++y) {
    auto* row = m.ptr<std::uint16_t>(y);
    for (int x = 0; x < mask.width; ++x) row[x] = static_cast<std::uint16_t>(mask.at(x, y));
  }
  if (!cv::imwrite(path.string(), m)) throw Error("cannot write " + path.string());
}

std::string encode_png_gray(const std::vector<std::uint8_t>& pixels, int width, int height) {
  cv::Mat m(height, width, CV_8UC1, const_cast<std::uint8_t*>(pixels.data()));
  std::vector<uchar> buf;
  cv::imencode(".png", m, buf);
  return std::string(buf.begin(), buf.end());
}

std::string encode_png_rgb(const RgbImage& image) {
  cv::Mat bgr(image.height, image.width, CV_8UC3);
  for (int y = 0; y < image.height; ++y) {
    auto* row = bgr.ptr<cv::Vec3b>(y);
    for (int x = 0; x < image.width; ++x) {
      row[x] = cv::Vec3b(image.at(x, y, 2), image.at(x, y, 1), image.at(x, y, 0));
    }
  }
  std::vector<uchar> buf;
  cv::imencode(".png", bgr, buf);
  return std::string(buf.begin(), buf.end());
}

}  // namespace stainforge::io
