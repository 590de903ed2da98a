#include "calikit/checkpoint.hpp"

#include <charconv>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace calikit {

namespace {

void append_double(std::string& out, double v) {
  char buf[32];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  if (ec != std::errc()) throw std::runtime_error("checkpoint: cannot format value");
  out.append(buf, ptr);
}

}  // namespace

std::string serialize_checkpoint(const Checkpoint& c) {
  if (c.names.size() != c.params.size()) {
    throw std::invalid_argument("checkpoint: names and params differ in length");
  }
  std::string out = kCheckpointMagic;
  out += "\nmanifest ";
  out += c.manifest.dump();
  out += '\n';
  for (std::size_t k = 0; k < c.params.size(); ++k) {
    const Array& p = c.params[k];
    if (!p.all_finite()) throw std::runtime_error("checkpoint: parameter " + c.names[k] + " is not finite");
    out += "param " + c.names[k] + ' ' + std::to_string(p.rows()) + ' ' + std::to_string(p.cols()) + '\n';
    for (std::size_t i = 0; i < p.size(); ++i) {
      if (i) out += ' ';
      append_double(out, p[i]);
    }
    out += '\n';
  }
  return out;
}

Checkpoint parse_checkpoint(const std::string& text, const std::string& origin) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != kCheckpointMagic) {
    throw std::runtime_error(origin + ": not a " + std::string(kCheckpointMagic) + " checkpoint");
  }
  Checkpoint c;
  if (!std::getline(in, line) || line.rfind("manifest ", 0) != 0) {
    throw std::runtime_error(origin + ": missing manifest line");
  }
  try {
    c.manifest = nlohmann::json::parse(line.substr(9));
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error(origin + ": malformed manifest: " + e.what());
  }
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream head(line);
    std::string tag, name;
    std::size_t rows = 0, cols = 0;
    if (!(head >> tag >> name >> rows >> cols) || tag != "param") {
      throw std::runtime_error(origin + ": malformed parameter header '" + line + "'");
    }
    std::string values;
    std::getline(in, values);
    std::vector<double> data;
    data.reserve(rows * cols);
    const char* p = values.data();
    const char* end = p + values.size();
    while (p < end) {
      while (p < end && *p == ' ') ++p;
      if (p == end) break;
      double v = 0.0;
      auto [next, ec] = std::from_chars(p, end, v);
      if (ec != std::errc()) throw std::runtime_error(origin + ": bad value in parameter " + name);
      data.push_back(v);
      p = next;
    }
    if (data.size() != rows * cols) {
      throw std::runtime_error(origin + ": parameter " + name + " has " + std::to_string(data.size()) +
                               " values, expected " + std::to_string(rows * cols));
    }
    c.names.push_back(name);
    c.params.emplace_back(rows, cols, std::move(data));
  }
  return c;
}

void save_checkpoint(const std::string& path, const Checkpoint& c) {
  const std::string text = serialize_checkpoint(c);
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write checkpoint " + tmp);
    out << text;
    if (!out) throw std::runtime_error("failed writing checkpoint " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("checkpoint not found: " + path);
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_checkpoint(buf.str(), path);
}

}  // namespace calikit
