#pragma once

#include <cstdint>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>

#include "coldloop/types.hpp"

namespace coldloop {

// ---- spectrum CSV -----------------------------------------------------------

inline void write_spectrum_csv(std::ostream& out, const SpectrumTrace& t) {
  char buf[96];
  out << "# n_avg=" << t.n_avg << "\n";
  std::snprintf(buf, sizeof buf, "# rbw_hz=%.17g\n", t.rbw);
  out << buf;
  out << "freq_hz,psd_shot_units\n";
  for (std::size_t i = 0; i < t.freqs.size(); ++i) {
    std::snprintf(buf, sizeof buf, "%.17g,%.17g\n", t.freqs[i], t.psd[i]);
    out << buf;
  }
}

inline void write_spectrum_csv(const std::string& path, const SpectrumTrace& t) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write spectrum file: " + path);
  write_spectrum_csv(out, t);
}

inline SpectrumTrace read_spectrum_csv(std::istream& in, const std::string& name = "<stream>") {
  SpectrumTrace t;
  std::string line;
  int lineno = 0;
  bool header_seen = false;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line[0] == '\r') continue;
    if (line[0] == '#') {
      std::size_t pos;
      if ((pos = line.find("n_avg=")) != std::string::npos)
        t.n_avg = static_cast<std::size_t>(std::stoull(line.substr(pos + 6)));
      else if ((pos = line.find("rbw_hz=")) != std::string::npos)
        t.rbw = std::stod(line.substr(pos + 7));
      continue;
    }
    if (!header_seen) {
      if (line.rfind("freq_hz,", 0) != 0)
        throw std::runtime_error(name + ":" + std::to_string(lineno) +
                                 ": expected 'freq_hz,psd_shot_units' header");
      header_seen = true;
      continue;
    }
    const auto comma = line.find(',');
    if (comma == std::string::npos)
      throw std::runtime_error(name + ":" + std::to_string(lineno) + ": expected two columns");
    try {
      t.freqs.push_back(std::stod(line.substr(0, comma)));
      t.psd.push_back(std::stod(line.substr(comma + 1)));
    } catch (const std::exception&) {
      throw std::runtime_error(name + ":" + std::to_string(lineno) + ": bad number");
    }
  }
  if (!header_seen) throw std::runtime_error(name + ": no CSV header found");
  validate(t);
  return t;
}

inline SpectrumTrace read_spectrum_csv(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open spectrum file: " + path);
  return read_spectrum_csv(in, path);
}

// ---- time-trace binary --------------------------------------------------------

inline const char* trace_kind_name(TraceKind k) {
  switch (k) {
    case TraceKind::displacement: return "displacement";
    case TraceKind::measurement: return "measurement";
    default: return "control";
  }
}

inline TraceKind trace_kind_from(const std::string& s) {
  if (s == "displacement") return TraceKind::displacement;
  if (s == "measurement") return TraceKind::measurement;
  if (s == "control") return TraceKind::control;
  throw std::runtime_error("unknown trace label: " + s);
}

/// Text header (magic, fs, label, seed, count) followed by raw little-endian
/// 64-bit floats.
inline void write_time_trace(const std::string& path, const TimeTrace& t,
                             std::uint64_t seed = 0) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write trace file: " + path);
  char buf[160];
  std::snprintf(buf, sizeof buf, "COLDLOOP-TRACE v1\nfs_hz=%.17g label=%s seed=%llu count=%zu\n",
                t.fs, trace_kind_name(t.label), static_cast<unsigned long long>(seed),
                t.samples.size());
  out << buf;
  out.write(reinterpret_cast<const char*>(t.samples.data()),
            static_cast<std::streamsize>(t.samples.size() * sizeof(double)));
}

inline TimeTrace read_time_trace(const std::string& path, std::uint64_t* seed_out = nullptr) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open trace file: " + path);
  std::string magic, header;
  std::getline(in, magic);
  std::getline(in, header);
  if (magic != "COLDLOOP-TRACE v1")
    throw std::runtime_error(path + ": not a coldloop trace file");
  TimeTrace t;
  std::uint64_t seed = 0;
  std::size_t count = 0;
  std::string label;
  std::istringstream hs(header);
  std::string tok;
  while (hs >> tok) {
    const auto eq = tok.find('=');
    if (eq == std::string::npos) continue;
    const std::string key = tok.substr(0, eq), val = tok.substr(eq + 1);
    if (key == "fs_hz") t.fs = std::stod(val);
    else if (key == "label") label = val;
    else if (key == "seed") seed = std::stoull(val);
    else if (key == "count") count = std::stoull(val);
  }
  t.label = trace_kind_from(label);
  t.samples.resize(count);
  in.read(reinterpret_cast<char*>(t.samples.data()),
          static_cast<std::streamsize>(count * sizeof(double)));
  if (static_cast<std::size_t>(in.gcount()) != count * sizeof(double))
    throw std::runtime_error(path + ": truncated trace data");
  if (seed_out) *seed_out = seed;
  return t;
}

// ---- generic two-column CSV (characterization data) ---------------------------

inline void write_xy_csv(const std::string& path, const std::string& header,
                         const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size()) throw std::invalid_argument("write_xy_csv: length mismatch");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write file: " + path);
  out << header << "\n";
  char buf[96];
  for (std::size_t i = 0; i < x.size(); ++i) {
    std::snprintf(buf, sizeof buf, "%.17g,%.17g\n", x[i], y[i]);
    out << buf;
  }
}

inline void read_xy_csv(const std::string& path, std::vector<double>& x,
                        std::vector<double>& y) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open file: " + path);
  std::string line;
  bool first = true;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    if (first) {  // header
      first = false;
      continue;
    }
    const auto comma = line.find(',');
    if (comma == std::string::npos)
      throw std::runtime_error(path + ":" + std::to_string(lineno) + ": expected two columns");
    x.push_back(std::stod(line.substr(0, comma)));
    y.push_back(std::stod(line.substr(comma + 1)));
  }
}

}  // namespace coldloop
