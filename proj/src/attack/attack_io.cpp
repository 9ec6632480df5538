#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "capsdefl/attack.hpp"
#include "capsdefl/data.hpp"
#include "capsdefl/error.hpp"

namespace capsdefl {
namespace {

constexpr const char* kHeader = "index,true_label,target,success,linf,l2,l1,gtd,lbd,ccd,combined";

std::string adv_name(std::size_t index) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "adv_%06zu.bin", index);
  return buf;
}

bool parse_flag(const std::string& s, int line) {
  if (s == "1") return true;
  if (s == "0" || s.empty()) return false;
  throw FormatError("attack_meta.csv line " + std::to_string(line) + ": bad flag `" + s + "`");
}

}  // namespace

void write_attack_dir(const std::string& dir, std::span<const AttackResult> results) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw RuntimeFailure("cannot create " + dir + ": " + ec.message());
  std::string csv = std::string(kHeader) + "\n";
  char line[256];
  for (std::size_t i = 0; i < results.size(); ++i) {
    const auto& r = results[i];
    std::snprintf(line, sizeof(line), "%zu,%d,%d,%d,%.6g,%.6g,%.6g,", i, r.label, r.target,
                  r.success ? 1 : 0, r.linf, r.l2, r.l1);
    csv += line;
    if (r.verdict) {
      std::snprintf(line, sizeof(line), "%d,%d,%d,%d\n", r.verdict->gtd_flag, r.verdict->lbd_flag,
                    r.verdict->ccd_flag, r.verdict->combined);
      csv += line;
    } else {
      csv += ",,,\n";
    }
    save_raw_f32(dir + "/" + adv_name(i), r.adversarial);
  }
  std::ofstream f(dir + "/attack_meta.csv", std::ios::binary | std::ios::trunc);
  if (!f) throw RuntimeFailure("cannot write " + dir + "/attack_meta.csv");
  f << csv;
  if (!f) throw RuntimeFailure("failed writing " + dir + "/attack_meta.csv");
}

std::vector<AttackRecord> read_attack_dir(const std::string& dir, std::size_t image_size) {
  std::ifstream f(dir + "/attack_meta.csv", std::ios::binary);
  if (!f) throw UsageError("no attack_meta.csv in " + dir);
  std::string line;
  if (!std::getline(f, line) || line != kHeader)
    throw FormatError(dir + "/attack_meta.csv: unexpected header");
  std::vector<AttackRecord> out;
  int lineno = 1;
  while (std::getline(f, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::vector<std::string> cols;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cols.push_back(cell);
    if (!line.empty() && line.back() == ',') cols.emplace_back();
    if (cols.size() != 11)
      throw FormatError("attack_meta.csv line " + std::to_string(lineno) + ": expected 11 columns");
    AttackRecord r;
    try {
      r.index = std::stoul(cols[0]);
      r.true_label = std::stoi(cols[1]);
      r.target = std::stoi(cols[2]);
      r.linf = std::stod(cols[4]);
      r.l2 = std::stod(cols[5]);
      r.l1 = std::stod(cols[6]);
    } catch (const std::exception&) {
      throw FormatError("attack_meta.csv line " + std::to_string(lineno) + ": malformed number");
    }
    r.success = parse_flag(cols[3], lineno);
    r.gtd = parse_flag(cols[7], lineno);
    r.lbd = parse_flag(cols[8], lineno);
    r.ccd = parse_flag(cols[9], lineno);
    r.combined = parse_flag(cols[10], lineno);
    r.adversarial = load_raw_f32(dir + "/" + adv_name(r.index), image_size);
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace capsdefl
