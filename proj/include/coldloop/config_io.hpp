#pragma once

#include <cstdint>
#include <cstdio>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "coldloop/model.hpp"
#include "coldloop/types.hpp"

namespace coldloop {

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Scenario files are plain INI-style text: [section] headers, key = value
// lines, '#' comments. Frequencies carry _hz, times _s, temperatures _k.
// [higher_mode] and [filter_section] repeat.

struct HeterodyneConfig {
  bool present = false;
  double omega_het = 0.0;       // rad/s
  double band_lo_hz = 0.0;      // integration band, offsets from the LO
  double band_hi_hz = 0.0;
  double probe_detuning = 0.0;  // rad/s, for the phase-noise correction
  double c_y = 0.0;
  double c_amp = 0.0;
  double c_theta = 0.0;
  double photon_flux = 0.0;
};

struct DesignConfig {
  bool present = false;
  double phase_target = 0.5 * pi;
  double g_min = 0.0, g_max = 0.0;
  double min_damping_slack = 0.0;
};

struct SweepConfig {
  std::vector<double> gains;
  std::size_t segments = 600;
};

struct SimConfig {
  double dt_s = 0.0;        // 0 = default
  double duration_s = 0.0;  // 0 = default
  std::uint64_t seed = 1;
};

struct ScenarioConfig {
  LoopConfig loop;
  HeterodyneConfig het;
  DesignConfig design;
  SweepConfig sweep;
  SimConfig sim;
  std::string source_path;
  std::string raw_text;
};

namespace detail {

struct ConfigEntry {
  std::string key, value;
  int line = 0;
  mutable bool used = false;
};

struct ConfigSection {
  std::string name;
  int line = 0;
  std::vector<ConfigEntry> entries;

  const ConfigEntry* find(const std::string& key) const {
    for (const auto& e : entries)
      if (e.key == key) {
        e.used = true;
        return &e;
      }
    return nullptr;
  }
};

struct ParsedConfig {
  std::string filename;
  std::vector<ConfigSection> sections;

  std::vector<const ConfigSection*> all(const std::string& name) const {
    std::vector<const ConfigSection*> out;
    for (const auto& s : sections)
      if (s.name == name) out.push_back(&s);
    return out;
  }
  const ConfigSection* one(const std::string& name, bool required) const {
    const auto v = all(name);
    if (v.size() > 1)
      throw ConfigError(filename + ": section [" + name + "] given more than once");
    if (v.empty()) {
      if (required) throw ConfigError(filename + ": missing required section [" + name + "]");
      return nullptr;
    }
    return v.front();
  }
};

inline std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  const auto b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

inline ParsedConfig parse_config_text(const std::string& text, const std::string& filename) {
  ParsedConfig cfg;
  cfg.filename = filename;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  ConfigSection* cur = nullptr;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']')
        throw ConfigError(filename + ":" + std::to_string(lineno) + ": malformed section header");
      ConfigSection s;
      s.name = trim(line.substr(1, line.size() - 2));
      s.line = lineno;
      cfg.sections.push_back(std::move(s));
      cur = &cfg.sections.back();
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError(filename + ":" + std::to_string(lineno) + ": expected key = value");
    if (!cur)
      throw ConfigError(filename + ":" + std::to_string(lineno) + ": key before any section");
    ConfigEntry e;
    e.key = trim(line.substr(0, eq));
    e.value = trim(line.substr(eq + 1));
    e.line = lineno;
    if (e.key.empty() || e.value.empty())
      throw ConfigError(filename + ":" + std::to_string(lineno) + ": empty key or value");
    cur->entries.push_back(std::move(e));
  }
  return cfg;
}

inline double parse_double(const ParsedConfig& cfg, const ConfigEntry& e) {
  try {
    std::size_t pos = 0;
    const double v = std::stod(e.value, &pos);
    if (pos != e.value.size()) throw std::invalid_argument("trailing characters");
    return v;
  } catch (const std::exception&) {
    throw ConfigError(cfg.filename + ":" + std::to_string(e.line) + ": key '" + e.key +
                      "' is not a number: '" + e.value + "'");
  }
}

inline double require_double(const ParsedConfig& cfg, const ConfigSection& s,
                             const std::string& key) {
  const ConfigEntry* e = s.find(key);
  if (!e)
    throw ConfigError(cfg.filename + ": [" + s.name + "] (line " + std::to_string(s.line) +
                      "): missing required key '" + key + "'");
  return parse_double(cfg, *e);
}

inline std::optional<double> optional_double(const ParsedConfig& cfg, const ConfigSection& s,
                                             const std::string& key) {
  const ConfigEntry* e = s.find(key);
  if (!e) return std::nullopt;
  return parse_double(cfg, *e);
}

inline void check_all_used(const ParsedConfig& cfg) {
  for (const auto& s : cfg.sections)
    for (const auto& e : s.entries)
      if (!e.used)
        throw ConfigError(cfg.filename + ":" + std::to_string(e.line) + ": unknown key '" +
                          e.key + "' in section [" + s.name + "]");
}

}  // namespace detail

inline ScenarioConfig parse_scenario_text(const std::string& text,
                                          const std::string& filename = "<string>") {
  using namespace detail;
  const ParsedConfig cfg = parse_config_text(text, filename);
  ScenarioConfig sc;
  sc.raw_text = text;
  sc.source_path = filename;

  const ConfigSection& mode = *cfg.one("mode", true);
  sc.loop.mode = MechanicalMode::from_frequency_q(
      require_double(cfg, mode, "frequency_hz"), require_double(cfg, mode, "q_factor"),
      optional_double(cfg, mode, "mass_kg").value_or(0.0));

  for (const ConfigSection* hm : cfg.all("higher_mode")) {
    WeightedMode wm;
    wm.mode = MechanicalMode::from_frequency_q(require_double(cfg, *hm, "frequency_hz"),
                                               require_double(cfg, *hm, "q_factor"));
    wm.weight = require_double(cfg, *hm, "weight");
    sc.loop.higher_modes.push_back(wm);
  }

  const ConfigSection& cav = *cfg.one("cavity", true);
  sc.loop.cavity.kappa = two_pi * require_double(cfg, cav, "kappa_hz");
  sc.loop.cavity.kappa_e = two_pi * require_double(cfg, cav, "kappa_e_hz");
  sc.loop.cavity.detuning = two_pi * optional_double(cfg, cav, "detuning_hz").value_or(0.0);

  const ConfigSection& cpl = *cfg.one("coupling", true);
  sc.loop.coupling.g0 = two_pi * require_double(cfg, cpl, "g0_hz");
  sc.loop.coupling.n_c = require_double(cfg, cpl, "n_c");
  sc.loop.coupling.eta_det = require_double(cfg, cpl, "eta_det");

  const ConfigSection& noi = *cfg.one("noise", true);
  const double t_bath = require_double(cfg, noi, "bath_temperature_k");
  const double n_th = thermal_occupation(t_bath, sc.loop.mode.omega_m);
  const double c0 = single_photon_cooperativity(sc.loop.coupling.g0, sc.loop.cavity.kappa,
                                                sc.loop.mode.gamma_m);
  const double n_ba =
      optional_double(cfg, noi, "n_ba").value_or(sc.loop.coupling.n_c * c0);
  sc.loop.noise = NoiseInputs::from_occupations(n_th, n_ba, sc.loop.mode.omega_m);

  if (const ConfigSection* meas = cfg.one("measurement", false)) {
    if (auto v = optional_double(cfg, *meas, "s_imp")) sc.loop.channel.s_imp = *v;
    if (auto v = optional_double(cfg, *meas, "shot_level")) sc.loop.channel.shot_level = *v;
  }
  if (sc.loop.channel.s_imp <= 0.0) {
    // quantum-limited imprecision 1/(4 Gamma_meas) at the configured efficiency
    const double gmeas = 4.0 * sc.loop.coupling.eta_det * sc.loop.coupling.n_c *
                         sc.loop.coupling.g0 * sc.loop.coupling.g0 / sc.loop.cavity.kappa;
    if (!(gmeas > 0.0))
      throw ConfigError(filename +
                        ": [measurement] s_imp missing and not derivable (n_c or eta_det is 0)");
    sc.loop.channel.s_imp = 1.0 / (4.0 * gmeas);
  }

  if (const ConfigSection* fb = cfg.one("feedback", false)) {
    sc.loop.filter.g_fb = optional_double(cfg, *fb, "gain").value_or(0.0);
    sc.loop.filter.tau_fb = optional_double(cfg, *fb, "delay_s").value_or(0.0);
    sc.loop.filter.epsilon_fb = optional_double(cfg, *fb, "epsilon").value_or(0.0);
  }
  for (const ConfigSection* fs : cfg.all("filter_section")) {
    BiquadSection s;
    s.b0 = require_double(cfg, *fs, "b0");
    s.b1 = optional_double(cfg, *fs, "b1").value_or(0.0);
    s.b2 = optional_double(cfg, *fs, "b2").value_or(0.0);
    s.a0 = require_double(cfg, *fs, "a0");
    s.a1 = optional_double(cfg, *fs, "a1").value_or(0.0);
    s.a2 = optional_double(cfg, *fs, "a2").value_or(0.0);
    sc.loop.filter.sections.push_back(s);
  }

  if (const ConfigSection* d = cfg.one("design", false)) {
    sc.design.present = true;
    sc.design.phase_target =
        optional_double(cfg, *d, "phase_target_rad").value_or(0.5 * pi);
    sc.design.g_min = optional_double(cfg, *d, "g_min").value_or(0.0);
    sc.design.g_max = optional_double(cfg, *d, "g_max").value_or(0.0);
    sc.design.min_damping_slack = optional_double(cfg, *d, "min_damping_slack").value_or(0.0);
  }

  if (const ConfigSection* h = cfg.one("heterodyne", false)) {
    sc.het.present = true;
    sc.het.omega_het = two_pi * require_double(cfg, *h, "omega_het_hz");
    sc.het.band_lo_hz = optional_double(cfg, *h, "band_lo_hz").value_or(0.0);
    sc.het.band_hi_hz = optional_double(cfg, *h, "band_hi_hz").value_or(0.0);
    sc.het.probe_detuning =
        two_pi * optional_double(cfg, *h, "probe_detuning_hz").value_or(0.0);
    sc.het.c_y = optional_double(cfg, *h, "c_y").value_or(0.0);
    sc.het.c_amp = optional_double(cfg, *h, "c_amp").value_or(0.0);
    sc.het.c_theta = optional_double(cfg, *h, "c_theta").value_or(0.0);
    sc.het.photon_flux = optional_double(cfg, *h, "photon_flux").value_or(0.0);
  }

  if (const ConfigSection* sw = cfg.one("sweep", false)) {
    if (const ConfigEntry* e = sw->find("gains")) {
      std::istringstream gs(e->value);
      std::string tok;
      while (std::getline(gs, tok, ',')) {
        tok = trim(tok);
        if (tok.empty()) continue;
        try {
          sc.sweep.gains.push_back(std::stod(tok));
        } catch (const std::exception&) {
          throw ConfigError(filename + ":" + std::to_string(e->line) +
                            ": bad gains entry '" + tok + "'");
        }
      }
    }
    if (auto v = optional_double(cfg, *sw, "segments"))
      sc.sweep.segments = static_cast<std::size_t>(*v);
  }

  if (const ConfigSection* sm = cfg.one("sim", false)) {
    sc.sim.dt_s = optional_double(cfg, *sm, "dt_s").value_or(0.0);
    sc.sim.duration_s = optional_double(cfg, *sm, "duration_s").value_or(0.0);
    if (auto v = optional_double(cfg, *sm, "seed"))
      sc.sim.seed = static_cast<std::uint64_t>(*v);
  }

  check_all_used(cfg);
  validate(sc.loop);
  return sc;
}

inline ScenarioConfig load_scenario(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open config file: " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  ScenarioConfig sc = parse_scenario_text(ss.str(), path);
  return sc;
}

namespace detail {

inline std::string fmt_g(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace detail

/// Serialize a scenario back to the text format; load(save(x)) == x.
inline std::string save_scenario_text(const ScenarioConfig& sc) {
  using detail::fmt_g;
  std::ostringstream o;
  o << "# coldloop scenario\n[mode]\n";
  o << "frequency_hz = " << fmt_g(sc.loop.mode.omega_m / two_pi) << "\n";
  o << "q_factor = " << fmt_g(sc.loop.mode.q_factor) << "\n";
  if (sc.loop.mode.m_eff > 0.0) o << "mass_kg = " << fmt_g(sc.loop.mode.m_eff) << "\n";
  for (const auto& [mode, weight] : sc.loop.higher_modes) {
    o << "\n[higher_mode]\n";
    o << "frequency_hz = " << fmt_g(mode.omega_m / two_pi) << "\n";
    o << "q_factor = " << fmt_g(mode.q_factor) << "\n";
    o << "weight = " << fmt_g(weight) << "\n";
  }
  o << "\n[cavity]\n";
  o << "kappa_hz = " << fmt_g(sc.loop.cavity.kappa / two_pi) << "\n";
  o << "kappa_e_hz = " << fmt_g(sc.loop.cavity.kappa_e / two_pi) << "\n";
  o << "detuning_hz = " << fmt_g(sc.loop.cavity.detuning / two_pi) << "\n";
  o << "\n[coupling]\n";
  o << "g0_hz = " << fmt_g(sc.loop.coupling.g0 / two_pi) << "\n";
  o << "n_c = " << fmt_g(sc.loop.coupling.n_c) << "\n";
  o << "eta_det = " << fmt_g(sc.loop.coupling.eta_det) << "\n";
  o << "\n[noise]\n";
  o << "bath_temperature_k = "
    << fmt_g(sc.loop.noise.n_th * hbar * sc.loop.mode.omega_m / k_boltzmann) << "\n";
  o << "n_ba = " << fmt_g(sc.loop.noise.n_ba) << "\n";
  o << "\n[measurement]\n";
  o << "s_imp = " << fmt_g(sc.loop.channel.s_imp) << "\n";
  o << "shot_level = " << fmt_g(sc.loop.channel.shot_level) << "\n";
  o << "\n[feedback]\n";
  o << "gain = " << fmt_g(sc.loop.filter.g_fb) << "\n";
  o << "delay_s = " << fmt_g(sc.loop.filter.tau_fb) << "\n";
  o << "epsilon = " << fmt_g(sc.loop.filter.epsilon_fb) << "\n";
  for (const auto& s : sc.loop.filter.sections) {
    o << "\n[filter_section]\n";
    o << "b0 = " << fmt_g(s.b0) << "\nb1 = " << fmt_g(s.b1) << "\nb2 = " << fmt_g(s.b2) << "\n";
    o << "a0 = " << fmt_g(s.a0) << "\na1 = " << fmt_g(s.a1) << "\na2 = " << fmt_g(s.a2) << "\n";
  }
  if (sc.design.present) {
    o << "\n[design]\n";
    o << "phase_target_rad = " << fmt_g(sc.design.phase_target) << "\n";
    o << "g_min = " << fmt_g(sc.design.g_min) << "\n";
    o << "g_max = " << fmt_g(sc.design.g_max) << "\n";
    o << "min_damping_slack = " << fmt_g(sc.design.min_damping_slack) << "\n";
  }
  if (sc.het.present) {
    o << "\n[heterodyne]\n";
    o << "omega_het_hz = " << fmt_g(sc.het.omega_het / two_pi) << "\n";
    o << "band_lo_hz = " << fmt_g(sc.het.band_lo_hz) << "\n";
    o << "band_hi_hz = " << fmt_g(sc.het.band_hi_hz) << "\n";
    o << "probe_detuning_hz = " << fmt_g(sc.het.probe_detuning / two_pi) << "\n";
    o << "c_y = " << fmt_g(sc.het.c_y) << "\n";
    o << "c_amp = " << fmt_g(sc.het.c_amp) << "\n";
    o << "c_theta = " << fmt_g(sc.het.c_theta) << "\n";
    o << "photon_flux = " << fmt_g(sc.het.photon_flux) << "\n";
  }
  if (!sc.sweep.gains.empty()) {
    o << "\n[sweep]\ngains = ";
    for (std::size_t i = 0; i < sc.sweep.gains.size(); ++i)
      o << (i ? ", " : "") << fmt_g(sc.sweep.gains[i]);
    o << "\nsegments = " << sc.sweep.segments << "\n";
  }
  o << "\n[sim]\n";
  if (sc.sim.dt_s > 0.0) o << "dt_s = " << fmt_g(sc.sim.dt_s) << "\n";
  if (sc.sim.duration_s > 0.0) o << "duration_s = " << fmt_g(sc.sim.duration_s) << "\n";
  o << "seed = " << sc.sim.seed << "\n";
  return o.str();
}

/// FNV-1a over the raw config bytes; manifests pin outputs to this.
inline std::string config_hash(const std::string& bytes) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 1099511628211ull;
  }
  char buf[20];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace coldloop
