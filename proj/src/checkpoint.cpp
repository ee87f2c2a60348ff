// Checkpoint container:
//
//   volseq-checkpoint\n
//   version 1\n
//   arch <id>\n
//   profile <name>\n
//   input <d1> <d2> <d3>\n
//   conv_channels <c...>\n
//   kernel <k>\n  pool <p>\n  hidden <h>\n  dense <w...>\n
//   dropout_layers <n>\n  classes <k>\n  dropout <rate>\n
//   config <key> <value>\n          (zero or more; training-config echo)
//   tensor <name> <d0xd1x...> <offset> <count>\n   (one per tensor)
//   payload <bytes>\n
//   checksum <crc32 hex>\n
//   end\n
//   <payload: little-endian float64 values>
//
// The CRC32 covers every manifest byte before the checksum line followed by
// the payload.

#include <zlib.h>

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <set>
#include <sstream>

#include "volseq/model.hpp"

namespace volseq {

namespace {

constexpr const char* kMagic = "volseq-checkpoint";

std::uint32_t crc_of(const char* data, std::size_t n, std::uint32_t crc) {
  while (n > 0) {
    const auto chunk = static_cast<uInt>(std::min<std::size_t>(n, 1u << 30));
    crc = static_cast<std::uint32_t>(::crc32(crc, reinterpret_cast<const Bytef*>(data), chunk));
    data += chunk;
    n -= chunk;
  }
  return crc;
}

void put_le_double(std::vector<char>& out, double v) {
  auto bits = std::bit_cast<std::uint64_t>(v);
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xFF));
}

double get_le_double(const char* p) {
  std::uint64_t bits = 0;
  for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(static_cast<unsigned char>(p[i])) << (8 * i);
  return std::bit_cast<double>(bits);
}

std::string join(const std::vector<std::size_t>& v, char sep) {
  std::ostringstream os;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) os << sep;
    os << v[i];
  }
  return os.str();
}

std::vector<std::size_t> parse_sizes(std::istringstream& is) {
  std::vector<std::size_t> out;
  std::size_t v;
  while (is >> v) out.push_back(v);
  return out;
}

Shape parse_shape(const std::string& s) {
  Shape shape;
  std::istringstream is(s);
  std::string part;
  while (std::getline(is, part, 'x')) shape.push_back(std::stoul(part));
  return shape;
}

}  // namespace

std::vector<char> serialize_checkpoint(const Model& model, const std::map<std::string, std::string>& config) {
  const auto& p = model.profile;
  std::ostringstream m;
  m << kMagic << '\n';
  m << "version " << kCheckpointVersion << '\n';
  m << "arch " << to_string(model.arch) << '\n';
  m << "profile " << p.name << '\n';
  m << "input " << p.input[0] << ' ' << p.input[1] << ' ' << p.input[2] << '\n';
  m << "conv_channels " << join(p.conv_channels, ' ') << '\n';
  m << "kernel " << p.kernel << '\n';
  m << "pool " << p.pool << '\n';
  m << "hidden " << p.hidden << '\n';
  m << "dense " << join(p.dense, ' ') << '\n';
  m << "dropout_layers " << p.dropout_layers << '\n';
  m << "classes " << p.classes << '\n';
  m << "dropout " << std::setprecision(17) << p.dropout << '\n';
  for (const auto& [k, v] : config) {
    if (k.find_first_of(" \n") != std::string::npos || v.find('\n') != std::string::npos) {
      throw Error(ErrorKind::Write, "config echo key/value must be single-line tokens: " + k);
    }
    m << "config " << k << ' ' << v << '\n';
  }

  std::vector<char> payload;
  std::size_t offset = 0;
  for (const auto& ref : model.parameters()) {
    m << "tensor " << ref.name << ' ' << join(ref.value->shape(), 'x') << ' ' << offset << ' ' << ref.value->size()
      << '\n';
    for (double v : ref.value->data()) put_le_double(payload, v);
    offset += ref.value->size();
  }
  m << "payload " << payload.size() << '\n';

  const std::string head = m.str();
  std::uint32_t crc = crc_of(head.data(), head.size(), 0);
  crc = crc_of(payload.data(), payload.size(), crc);
  std::ostringstream tail;
  tail << "checksum " << std::hex << std::setw(8) << std::setfill('0') << crc << '\n' << "end\n";
  const std::string tail_s = tail.str();

  std::vector<char> out(head.begin(), head.end());
  out.insert(out.end(), tail_s.begin(), tail_s.end());
  out.insert(out.end(), payload.begin(), payload.end());
  return out;
}

Checkpoint deserialize_checkpoint(const std::vector<char>& bytes) {
  std::size_t pos = 0;
  auto next_line = [&](std::string& line) -> bool {
    const auto it = std::find(bytes.begin() + static_cast<std::ptrdiff_t>(pos), bytes.end(), '\n');
    if (it == bytes.end()) return false;
    const auto end = static_cast<std::size_t>(it - bytes.begin());
    line.assign(bytes.data() + pos, end - pos);
    pos = end + 1;
    return true;
  };

  std::string line;
  if (!next_line(line) || line != kMagic) throw Error(ErrorKind::Format, "not a volseq checkpoint");

  Profile profile;
  std::string arch_name;
  std::map<std::string, std::string> config;
  struct Entry {
    Shape shape;
    std::size_t offset, count;
  };
  std::map<std::string, Entry> entries;
  std::size_t payload_bytes = 0;
  std::size_t checksum_line_start = 0;
  std::uint32_t stored_crc = 0;
  bool have_version = false, have_checksum = false, have_end = false;

  while (!have_end) {
    const std::size_t line_start = pos;
    if (!next_line(line)) throw Error(ErrorKind::Format, "checkpoint manifest is truncated");
    std::istringstream is(line);
    std::string key;
    is >> key;
    try {
      if (key == "version") {
        int v = 0;
        is >> v;
        if (v != kCheckpointVersion) {
          throw Error(ErrorKind::Version, "checkpoint version " + std::to_string(v) + " is not supported (expected " +
                                              std::to_string(kCheckpointVersion) + ")");
        }
        have_version = true;
      } else if (key == "arch") {
        is >> arch_name;
      } else if (key == "profile") {
        is >> profile.name;
      } else if (key == "input") {
        auto v = parse_sizes(is);
        if (v.size() != 3) throw Error(ErrorKind::Schema, "input needs three extents");
        profile.input = {v[0], v[1], v[2]};
      } else if (key == "conv_channels") {
        profile.conv_channels = parse_sizes(is);
      } else if (key == "kernel") {
        is >> profile.kernel;
      } else if (key == "pool") {
        is >> profile.pool;
      } else if (key == "hidden") {
        is >> profile.hidden;
      } else if (key == "dense") {
        profile.dense = parse_sizes(is);
      } else if (key == "dropout_layers") {
        is >> profile.dropout_layers;
      } else if (key == "classes") {
        is >> profile.classes;
      } else if (key == "dropout") {
        is >> profile.dropout;
      } else if (key == "config") {
        std::string k, v;
        is >> k;
        std::getline(is >> std::ws, v);
        config[k] = v;
      } else if (key == "tensor") {
        std::string name, shape;
        Entry e{};
        is >> name >> shape >> e.offset >> e.count;
        if (is.fail()) throw Error(ErrorKind::Schema, "malformed tensor line: " + line);
        e.shape = parse_shape(shape);
        if (!entries.emplace(name, e).second) throw Error(ErrorKind::Schema, "tensor '" + name + "' listed twice");
      } else if (key == "payload") {
        is >> payload_bytes;
      } else if (key == "checksum") {
        std::string hex;
        is >> hex;
        stored_crc = static_cast<std::uint32_t>(std::stoul(hex, nullptr, 16));
        checksum_line_start = line_start;
        have_checksum = true;
      } else if (key == "end") {
        have_end = true;
      } else {
        throw Error(ErrorKind::Schema, "unknown manifest key '" + key + "'");
      }
    } catch (const std::invalid_argument&) {
      throw Error(ErrorKind::Schema, "malformed manifest line: " + line);
    } catch (const std::out_of_range&) {
      throw Error(ErrorKind::Schema, "malformed manifest line: " + line);
    }
  }
  if (!have_version) throw Error(ErrorKind::Version, "checkpoint has no version line");
  if (!have_checksum) throw Error(ErrorKind::Integrity, "checkpoint has no checksum");
  if (bytes.size() - pos != payload_bytes) {
    throw Error(ErrorKind::Integrity, "payload is " + std::to_string(bytes.size() - pos) + " bytes, manifest says " +
                                          std::to_string(payload_bytes));
  }
  std::uint32_t crc = crc_of(bytes.data(), checksum_line_start, 0);
  crc = crc_of(bytes.data() + pos, payload_bytes, crc);
  if (crc != stored_crc) throw Error(ErrorKind::Integrity, "checkpoint checksum mismatch");

  Checkpoint ck;
  try {
    ck.model = Model::build(architecture_from_string(arch_name), profile, 0);
  } catch (const Error& e) {
    throw Error(ErrorKind::Schema, std::string("checkpoint architecture/profile invalid: ") + e.what());
  }
  ck.config = std::move(config);
  const char* payload = bytes.data() + pos;
  std::set<std::string> seen;
  for (auto& ref : ck.model.parameters()) {
    const auto it = entries.find(ref.name);
    if (it == entries.end()) throw Error(ErrorKind::Schema, "checkpoint is missing tensor '" + ref.name + "'");
    const Entry& e = it->second;
    if (e.shape != ref.value->shape() || e.count != ref.value->size()) {
      throw Error(ErrorKind::Schema, "tensor '" + ref.name + "' has shape " + shape_string(e.shape) + ", expected " +
                                         shape_string(ref.value->shape()));
    }
    if ((e.offset + e.count) * 8 > payload_bytes) {
      throw Error(ErrorKind::Schema, "tensor '" + ref.name + "' runs past the payload");
    }
    for (std::size_t i = 0; i < e.count; ++i) (*ref.value)[i] = get_le_double(payload + (e.offset + i) * 8);
    seen.insert(ref.name);
  }
  for (const auto& [name, e] : entries) {
    if (!seen.count(name)) throw Error(ErrorKind::Schema, "unexpected tensor '" + name + "' in checkpoint");
  }
  return ck;
}

void save_checkpoint(const Model& model, const std::filesystem::path& path,
                     const std::map<std::string, std::string>& config) {
  const auto bytes = serialize_checkpoint(model, config);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorKind::Write, "cannot open '" + path.string() + "' for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error(ErrorKind::Write, "failed writing '" + path.string() + "'");
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::Input, "cannot open checkpoint '" + path.string() + "'");
  std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return deserialize_checkpoint(bytes);
}

}  // namespace volseq
