#include "headgen/geomio.hpp"

#include <json.hpp>

#include <charconv>
#include <cstring>
#include <fstream>
#include <sstream>

namespace headgen::geomio {

namespace {

std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

enum class PlyType { Float32, Float64, Int8, Uint8, Int16, Uint16, Int32, Uint32 };

PlyType parse_type(const std::string& s) {
  if (s == "float" || s == "float32") return PlyType::Float32;
  if (s == "double" || s == "float64") return PlyType::Float64;
  if (s == "char" || s == "int8") return PlyType::Int8;
  if (s == "uchar" || s == "uint8") return PlyType::Uint8;
  if (s == "short" || s == "int16") return PlyType::Int16;
  if (s == "ushort" || s == "uint16") return PlyType::Uint16;
  if (s == "int" || s == "int32") return PlyType::Int32;
  if (s == "uint" || s == "uint32") return PlyType::Uint32;
  throw std::runtime_error("unsupported ply type: " + s);
}

size_t type_size(PlyType t) {
  switch (t) {
    case PlyType::Int8:
    case PlyType::Uint8:
      return 1;
    case PlyType::Int16:
    case PlyType::Uint16:
      return 2;
    case PlyType::Float32:
    case PlyType::Int32:
    case PlyType::Uint32:
      return 4;
    case PlyType::Float64:
      return 8;
  }
  return 0;
}

double read_binary_scalar(std::istream& in, PlyType t) {
  unsigned char buf[8];
  in.read(reinterpret_cast<char*>(buf), static_cast<std::streamsize>(type_size(t)));
  if (!in) throw std::runtime_error("truncated ply payload");
  switch (t) {
    case PlyType::Float32: {
      float f;
      std::memcpy(&f, buf, 4);
      return f;
    }
    case PlyType::Float64: {
      double d;
      std::memcpy(&d, buf, 8);
      return d;
    }
    case PlyType::Int8:
      return static_cast<int8_t>(buf[0]);
    case PlyType::Uint8:
      return buf[0];
    case PlyType::Int16: {
      int16_t v;
      std::memcpy(&v, buf, 2);
      return v;
    }
    case PlyType::Uint16: {
      uint16_t v;
      std::memcpy(&v, buf, 2);
      return v;
    }
    case PlyType::Int32: {
      int32_t v;
      std::memcpy(&v, buf, 4);
      return v;
    }
    case PlyType::Uint32: {
      uint32_t v;
      std::memcpy(&v, buf, 4);
      return v;
    }
  }
  return 0.0;
}

struct PlyProperty {
  std::string name;
  bool is_list = false;
  PlyType count_type = PlyType::Uint8;
  PlyType type = PlyType::Float64;
};

struct PlyElement {
  std::string name;
  size_t count = 0;
  std::vector<PlyProperty> props;
};

}  // namespace

void write_ply(const std::string& path, const Mesh& mesh, PlyFormat format,
               const std::vector<std::string>& comments) {
  mesh.validate();
  std::ofstream out(path, std::ios::binary);
  HG_CHECK_ARG(out.good(), "cannot open for writing: " + path);
  const bool binary = format == PlyFormat::BinaryLittleEndian;
  out << "ply\n"
      << (binary ? "format binary_little_endian 1.0\n" : "format ascii 1.0\n");
  for (const auto& c : comments) out << "comment " << c << "\n";
  out << "element vertex " << mesh.vertex_count() << "\n";
  out << "property double x\nproperty double y\nproperty double z\n";
  if (mesh.has_normals()) out << "property double nx\nproperty double ny\nproperty double nz\n";
  if (mesh.has_colors())
    out << "property double red\nproperty double green\nproperty double blue\n";
  out << "element face " << mesh.face_count() << "\n";
  out << "property list uchar int vertex_indices\n";
  out << "end_header\n";

  if (binary) {
    for (int i = 0; i < mesh.vertex_count(); ++i) {
      double row[9];
      int n = 0;
      for (int c = 0; c < 3; ++c) row[n++] = mesh.vertices(i, c);
      if (mesh.has_normals())
        for (int c = 0; c < 3; ++c) row[n++] = mesh.normals(i, c);
      if (mesh.has_colors())
        for (int c = 0; c < 3; ++c) row[n++] = mesh.colors(i, c);
      out.write(reinterpret_cast<const char*>(row), n * 8);
    }
    for (int f = 0; f < mesh.face_count(); ++f) {
      const unsigned char cnt = 3;
      out.write(reinterpret_cast<const char*>(&cnt), 1);
      int32_t idx[3] = {mesh.faces(f, 0), mesh.faces(f, 1), mesh.faces(f, 2)};
      out.write(reinterpret_cast<const char*>(idx), 12);
    }
  } else {
    for (int i = 0; i < mesh.vertex_count(); ++i) {
      out << format_double(mesh.vertices(i, 0)) << ' ' << format_double(mesh.vertices(i, 1))
          << ' ' << format_double(mesh.vertices(i, 2));
      if (mesh.has_normals())
        for (int c = 0; c < 3; ++c) out << ' ' << format_double(mesh.normals(i, c));
      if (mesh.has_colors())
        for (int c = 0; c < 3; ++c) out << ' ' << format_double(mesh.colors(i, c));
      out << '\n';
    }
    for (int f = 0; f < mesh.face_count(); ++f)
      out << "3 " << mesh.faces(f, 0) << ' ' << mesh.faces(f, 1) << ' ' << mesh.faces(f, 2)
          << '\n';
  }
  HG_CHECK(out.good(), "write failed: " + path);
}

Mesh read_ply(const std::string& path, std::vector<std::string>* comments) {
  std::ifstream in(path, std::ios::binary);
  HG_CHECK_ARG(in.good(), "cannot open: " + path);
  std::string line;
  std::getline(in, line);
  if (!line.empty() && line.back() == '\r') line.pop_back();
  HG_CHECK_ARG(line == "ply", "not a ply file: " + path);

  bool binary = false;
  std::vector<PlyElement> elements;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    std::istringstream ss(line);
    std::string tok;
    ss >> tok;
    if (tok == "format") {
      std::string fmt;
      ss >> fmt;
      if (fmt == "binary_little_endian")
        binary = true;
      else
        HG_CHECK_ARG(fmt == "ascii", "unsupported ply format: " + fmt);
    } else if (tok == "comment") {
      if (comments) comments->push_back(line.substr(8));
    } else if (tok == "element") {
      PlyElement e;
      ss >> e.name >> e.count;
      elements.push_back(e);
    } else if (tok == "property") {
      HG_CHECK_ARG(!elements.empty(), "property before element");
      PlyProperty p;
      std::string t;
      ss >> t;
      if (t == "list") {
        p.is_list = true;
        std::string ct, vt;
        ss >> ct >> vt >> p.name;
        p.count_type = parse_type(ct);
        p.type = parse_type(vt);
      } else {
        p.type = parse_type(t);
        ss >> p.name;
      }
      elements.back().props.push_back(p);
    } else if (tok == "end_header") {
      break;
    }
  }

  Mesh mesh;
  std::vector<std::array<int, 3>> tris;
  for (const auto& elem : elements) {
    if (elem.name == "vertex") {
      int ix = -1, iy = -1, iz = -1, inx = -1, iny = -1, inz = -1, ir = -1, ig = -1, ib = -1;
      for (size_t p = 0; p < elem.props.size(); ++p) {
        const auto& name = elem.props[p].name;
        if (name == "x") ix = static_cast<int>(p);
        if (name == "y") iy = static_cast<int>(p);
        if (name == "z") iz = static_cast<int>(p);
        if (name == "nx") inx = static_cast<int>(p);
        if (name == "ny") iny = static_cast<int>(p);
        if (name == "nz") inz = static_cast<int>(p);
        if (name == "red") ir = static_cast<int>(p);
        if (name == "green") ig = static_cast<int>(p);
        if (name == "blue") ib = static_cast<int>(p);
      }
      HG_CHECK_ARG(ix >= 0 && iy >= 0 && iz >= 0, "ply vertex element lacks x/y/z");
      const bool has_n = inx >= 0 && iny >= 0 && inz >= 0;
      const bool has_c = ir >= 0 && ig >= 0 && ib >= 0;
      mesh.vertices.resize(static_cast<int>(elem.count), 3);
      if (has_n) mesh.normals.resize(static_cast<int>(elem.count), 3);
      if (has_c) mesh.colors.resize(static_cast<int>(elem.count), 3);
      std::vector<double> vals(elem.props.size());
      for (size_t i = 0; i < elem.count; ++i) {
        for (size_t p = 0; p < elem.props.size(); ++p) {
          HG_CHECK_ARG(!elem.props[p].is_list, "list property on vertices unsupported");
          if (binary)
            vals[p] = read_binary_scalar(in, elem.props[p].type);
          else {
            if (!(in >> vals[p])) throw std::runtime_error("truncated ply vertex data");
          }
          // 8-bit colors are rescaled to unit range
          if (elem.props[p].type == PlyType::Uint8 &&
              (static_cast<int>(p) == ir || static_cast<int>(p) == ig ||
               static_cast<int>(p) == ib))
            vals[p] /= 255.0;
        }
        const int row = static_cast<int>(i);
        mesh.vertices.row(row) << vals[ix], vals[iy], vals[iz];
        if (has_n) mesh.normals.row(row) << vals[inx], vals[iny], vals[inz];
        if (has_c) mesh.colors.row(row) << vals[ir], vals[ig], vals[ib];
      }
    } else if (elem.name == "face") {
      for (size_t i = 0; i < elem.count; ++i) {
        for (const auto& p : elem.props) {
          HG_CHECK_ARG(p.is_list, "face element must use list properties");
          size_t cnt;
          if (binary)
            cnt = static_cast<size_t>(read_binary_scalar(in, p.count_type));
          else {
            in >> cnt;
          }
          std::vector<int> poly(cnt);
          for (size_t k = 0; k < cnt; ++k) {
            if (binary)
              poly[k] = static_cast<int>(read_binary_scalar(in, p.type));
            else
              in >> poly[k];
          }
          for (size_t k = 2; k < cnt; ++k) tris.push_back({poly[0], poly[k - 1], poly[k]});
        }
      }
    } else {
      // consume and ignore unknown elements
      for (size_t i = 0; i < elem.count; ++i)
        for (const auto& p : elem.props) {
          size_t cnt = 1;
          if (p.is_list) {
            if (binary)
              cnt = static_cast<size_t>(read_binary_scalar(in, p.count_type));
            else
              in >> cnt;
          }
          for (size_t k = 0; k < cnt; ++k) {
            if (binary)
              read_binary_scalar(in, p.type);
            else {
              double dummy;
              in >> dummy;
            }
          }
        }
    }
  }
  mesh.faces.resize(static_cast<int>(tris.size()), 3);
  for (size_t i = 0; i < tris.size(); ++i)
    for (int c = 0; c < 3; ++c) mesh.faces(static_cast<int>(i), c) = tris[i][c];
  mesh.validate();
  return mesh;
}

void write_obj(const std::string& path, const Mesh& mesh) {
  mesh.validate();
  std::ofstream out(path, std::ios::binary);
  HG_CHECK_ARG(out.good(), "cannot open for writing: " + path);
  for (int i = 0; i < mesh.vertex_count(); ++i) {
    out << "v " << format_double(mesh.vertices(i, 0)) << ' ' << format_double(mesh.vertices(i, 1))
        << ' ' << format_double(mesh.vertices(i, 2));
    if (mesh.has_colors())
      for (int c = 0; c < 3; ++c) out << ' ' << format_double(mesh.colors(i, c));
    out << '\n';
  }
  const bool has_n = mesh.has_normals();
  if (has_n)
    for (int i = 0; i < mesh.vertex_count(); ++i)
      out << "vn " << format_double(mesh.normals(i, 0)) << ' '
          << format_double(mesh.normals(i, 1)) << ' ' << format_double(mesh.normals(i, 2))
          << '\n';
  for (int f = 0; f < mesh.face_count(); ++f) {
    out << 'f';
    for (int c = 0; c < 3; ++c) {
      const int idx = mesh.faces(f, c) + 1;
      if (has_n)
        out << ' ' << idx << "//" << idx;
      else
        out << ' ' << idx;
    }
    out << '\n';
  }
  HG_CHECK(out.good(), "write failed: " + path);
}

Mesh read_obj(const std::string& path) {
  std::ifstream in(path);
  HG_CHECK_ARG(in.good(), "cannot open: " + path);
  std::vector<Vec3> verts, colors, normals;
  std::vector<std::array<int, 3>> tris;
  bool any_color = false;
  std::string line;
  while (std::getline(in, line)) {
    std::istringstream ss(line);
    std::string tok;
    ss >> tok;
    if (tok == "v") {
      double x, y, z;
      ss >> x >> y >> z;
      verts.emplace_back(x, y, z);
      double r, g, b;
      if (ss >> r >> g >> b) {
        colors.emplace_back(r, g, b);
        any_color = true;
      } else {
        colors.emplace_back(0, 0, 0);
      }
    } else if (tok == "vn") {
      double x, y, z;
      ss >> x >> y >> z;
      normals.emplace_back(x, y, z);
    } else if (tok == "f") {
      std::vector<int> poly;
      std::string corner;
      while (ss >> corner) {
        const auto slash = corner.find('/');
        poly.push_back(std::stoi(slash == std::string::npos ? corner : corner.substr(0, slash)) -
                       1);
      }
      for (size_t k = 2; k < poly.size(); ++k) tris.push_back({poly[0], poly[k - 1], poly[k]});
    }
  }
  Mesh mesh;
  mesh.vertices.resize(static_cast<int>(verts.size()), 3);
  for (size_t i = 0; i < verts.size(); ++i)
    mesh.vertices.row(static_cast<int>(i)) = verts[i].transpose();
  if (any_color) {
    mesh.colors.resize(static_cast<int>(colors.size()), 3);
    for (size_t i = 0; i < colors.size(); ++i)
      mesh.colors.row(static_cast<int>(i)) = colors[i].transpose();
  }
  if (normals.size() == verts.size()) {
    mesh.normals.resize(static_cast<int>(normals.size()), 3);
    for (size_t i = 0; i < normals.size(); ++i)
      mesh.normals.row(static_cast<int>(i)) = normals[i].transpose();
  }
  mesh.faces.resize(static_cast<int>(tris.size()), 3);
  for (size_t i = 0; i < tris.size(); ++i)
    for (int c = 0; c < 3; ++c) mesh.faces(static_cast<int>(i), c) = tris[i][c];
  mesh.validate();
  return mesh;
}

void write_scan(const std::string& path, const Scan& scan, PlyFormat format) {
  nlohmann::json params;
  params["beta"] = std::vector<double>(scan.params.beta.data(),
                                       scan.params.beta.data() + scan.params.beta.size());
  params["theta"] = std::vector<double>(scan.params.theta.data(),
                                        scan.params.theta.data() + scan.params.theta.size());
  params["psi"] = std::vector<double>(scan.params.psi.data(),
                                      scan.params.psi.data() + scan.params.psi.size());
  std::vector<std::string> comments = {"headgen_subject " + scan.subject_id,
                                       "headgen_params " + params.dump()};
  write_ply(path, scan.mesh, format, comments);
}

Scan read_scan(const std::string& path) {
  Scan scan;
  std::vector<std::string> comments;
  scan.mesh = read_ply(path, &comments);
  for (const auto& c : comments) {
    if (c.rfind("headgen_subject ", 0) == 0) {
      scan.subject_id = c.substr(16);
    } else if (c.rfind("headgen_params ", 0) == 0) {
      const auto j = nlohmann::json::parse(c.substr(15));
      const auto beta = j.at("beta").get<std::vector<double>>();
      const auto theta = j.at("theta").get<std::vector<double>>();
      const auto psi = j.at("psi").get<std::vector<double>>();
      scan.params.beta = Eigen::Map<const Vec>(beta.data(), static_cast<Eigen::Index>(beta.size()));
      scan.params.theta =
          Eigen::Map<const Vec>(theta.data(), static_cast<Eigen::Index>(theta.size()));
      scan.params.psi = Eigen::Map<const Vec>(psi.data(), static_cast<Eigen::Index>(psi.size()));
    }
  }
  return scan;
}

}  // namespace headgen::geomio
