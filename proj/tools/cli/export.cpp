#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "cli/commands.hpp"
#include "cli/config.hpp"
#include "fgl/error.hpp"
#include "fgl/training.hpp"

namespace fgl::cli {

using nlohmann::json;

namespace {

const char* const kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"};

std::string num(double v) {
  std::ostringstream ss;
  ss.precision(6);
  ss << v;
  return ss.str();
}

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

std::string xml_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '&': out += "&amp;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

struct Series {
  std::string label;
  std::vector<std::pair<double, double>> points;
};

// Minimal SVG chart: axes with min/max labels, one polyline (or point set)
// per series, legend on the right.
std::string svg_chart(const std::string& title, const std::string& xlabel, const std::string& ylabel,
                      const std::vector<Series>& series, bool scatter) {
  const double W = 640, H = 400, left = 70, right = 170, top = 40, bottom = 50;
  double x0 = INFINITY, x1 = -INFINITY, y0 = INFINITY, y1 = -INFINITY;
  for (const auto& s : series) {
    for (const auto& [x, y] : s.points) {
      x0 = std::min(x0, x);
      x1 = std::max(x1, x);
      y0 = std::min(y0, y);
      y1 = std::max(y1, y);
    }
  }
  if (!(x0 <= x1)) throw Error("nothing to plot for " + title);
  if (x1 - x0 < 1e-12) x0 -= 0.5, x1 += 0.5;
  if (y1 - y0 < 1e-12) y0 -= 0.5, y1 += 0.5;
  const double pw = W - left - right, ph = H - top - bottom;
  auto sx = [&](double x) { return left + (x - x0) / (x1 - x0) * pw; };
  auto sy = [&](double y) { return top + ph - (y - y0) / (y1 - y0) * ph; };

  std::ostringstream o;
  o << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H
    << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  o << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  o << "<text x=\"" << W / 2 << "\" y=\"22\" text-anchor=\"middle\" font-size=\"14\">" << xml_escape(title)
    << "</text>\n";
  o << "<rect x=\"" << left << "\" y=\"" << top << "\" width=\"" << pw << "\" height=\"" << ph
    << "\" fill=\"none\" stroke=\"black\"/>\n";
  o << "<text x=\"" << left << "\" y=\"" << top + ph + 16 << "\" text-anchor=\"middle\">" << num(x0) << "</text>\n";
  o << "<text x=\"" << left + pw << "\" y=\"" << top + ph + 16 << "\" text-anchor=\"middle\">" << num(x1)
    << "</text>\n";
  o << "<text x=\"" << left - 6 << "\" y=\"" << top + ph << "\" text-anchor=\"end\">" << num(y0) << "</text>\n";
  o << "<text x=\"" << left - 6 << "\" y=\"" << top + 10 << "\" text-anchor=\"end\">" << num(y1) << "</text>\n";
  o << "<text x=\"" << left + pw / 2 << "\" y=\"" << H - 12 << "\" text-anchor=\"middle\">" << xml_escape(xlabel)
    << "</text>\n";
  o << "<text x=\"16\" y=\"" << top + ph / 2 << "\" text-anchor=\"middle\" transform=\"rotate(-90 16 " << top + ph / 2
    << ")\">" << xml_escape(ylabel) << "</text>\n";
  for (std::size_t i = 0; i < series.size(); ++i) {
    const auto& s = series[i];
    const char* color = kPalette[i % std::size(kPalette)];
    if (scatter) {
      for (const auto& [x, y] : s.points) {
        o << "<circle cx=\"" << num(sx(x)) << "\" cy=\"" << num(sy(y)) << "\" r=\"5\" fill=\"" << color << "\"/>\n";
      }
    } else {
      o << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"2\" points=\"";
      for (const auto& [x, y] : s.points) o << num(sx(x)) << "," << num(sy(y)) << " ";
      o << "\"/>\n";
    }
    const double ly = top + 14 + 18 * static_cast<double>(i);
    o << "<rect x=\"" << W - right + 12 << "\" y=\"" << ly - 9 << "\" width=\"10\" height=\"10\" fill=\"" << color
      << "\"/>\n";
    o << "<text x=\"" << W - right + 28 << "\" y=\"" << ly << "\">" << xml_escape(s.label) << "</text>\n";
  }
  o << "</svg>\n";
  return o.str();
}

// runs/finetune-mix-review-s1/trace.jsonl -> finetune-mix-review-s1
std::string stem_for(const fs::path& p, std::set<std::string>& used) {
  std::string base = p.stem().string();
  if ((base == "trace" || base == "projection") && p.has_parent_path() && p.parent_path().has_filename()) {
    base = p.parent_path().filename().string() + (base == "projection" ? "-projection" : "");
  }
  std::string name = base;
  for (int i = 2; used.count(name); ++i) name = base + "-" + std::to_string(i);
  used.insert(name);
  return name;
}

void export_trace(const fs::path& path, const std::string& stem, std::map<fs::path, std::string>& files,
                  const fs::path& out_dir) {
  const auto trace = load_trace(path.string());
  if (trace.empty()) throw Error(path.string() + " has no rows");
  std::vector<std::string> splits;
  for (const auto& [s, v] : trace.front().nll) splits.push_back(s);

  std::ostringstream csv;
  csv << "epoch,step,lr,train_nll,wd_penalty";
  for (const auto& s : splits) csv << "," << s << "_nll," << s << "_ppl";
  csv << "\n";
  std::vector<Series> series;
  for (const auto& s : splits) series.push_back({s, {}});
  Series train{"train", {}};
  for (const auto& r : trace) {
    csv << r.epoch << "," << r.step << "," << num(r.lr) << "," << num(r.train_nll) << "," << num(r.wd_penalty);
    for (std::size_t i = 0; i < splits.size(); ++i) {
      auto it = r.nll.find(splits[i]);
      if (it == r.nll.end()) throw Error(path.string() + ": epoch " + std::to_string(r.epoch) + " lacks split " + splits[i]);
      csv << "," << num(it->second) << "," << num(r.ppl.at(splits[i]));
      series[i].points.push_back({static_cast<double>(r.epoch), it->second});
    }
    csv << "\n";
    // epoch 0 has no training pass
    if (r.epoch > 0) train.points.push_back({static_cast<double>(r.epoch), r.train_nll});
  }
  if (!train.points.empty()) series.push_back(train);
  files[out_dir / (stem + ".nll.csv")] = csv.str();
  files[out_dir / (stem + ".nll.svg")] = svg_chart(stem, "epoch", "NLL per token", series, false);
}

void export_projection(const json& report, const fs::path& path, const std::string& stem,
                       std::map<fs::path, std::string>& files, const fs::path& out_dir) {
  std::ostringstream csv;
  csv << "space,checkpoint,x,y\n";
  bool any = false;
  for (const char* space : {"function_space", "parameter_space"}) {
    if (!report.contains(space)) continue;
    any = true;
    std::vector<Series> series;
    for (const auto& p : report[space].at("points")) {
      const auto id = p.at("checkpoint").get<std::string>();
      csv << space << "," << csv_field(id) << "," << num(p.at("x").get<double>()) << "," << num(p.at("y").get<double>())
          << "\n";
      series.push_back({fs::path(id).parent_path().filename().string() + "/" + fs::path(id).filename().string(),
                        {{p.at("x").get<double>(), p.at("y").get<double>()}}});
    }
    const double captured = report[space].at("captured_variance").get<double>();
    const double total = report[space].at("total_variance").get<double>();
    std::string title = std::string(space) + " PCA";
    if (total > 0) title += " (" + num(100.0 * captured / total) + "% of variance)";
    files[out_dir / (stem + "." + space + ".svg")] = svg_chart(title, "PC1", "PC2", series, true);
  }
  if (!any) throw Error(path.string() + " has no projection results");
  files[out_dir / (stem + ".csv")] = csv.str();
}

std::string get_or_blank(const json& j, const std::vector<std::string>& keys) {
  const json* cur = &j;
  for (const auto& k : keys) {
    if (!cur->is_object() || !cur->contains(k)) return "";
    cur = &(*cur)[k];
  }
  if (cur->is_string()) return cur->get<std::string>();
  if (cur->is_number()) return num(cur->get<double>());
  return cur->dump();
}

}  // namespace

std::vector<fs::path> cmd_export(const std::vector<std::string>& inputs, const fs::path& out_dir, std::ostream& log) {
  if (inputs.empty()) throw UsageError("export needs at least one trace or report file");
  std::map<fs::path, std::string> files;
  std::set<std::string> used;
  std::vector<json> reports;
  std::set<std::string> ppl_splits;

  for (const auto& in : inputs) {
    const fs::path path(in);
    if (!fs::is_regular_file(path)) throw Error("no such file: " + in);
    if (path.extension() == ".jsonl") {
      export_trace(path, stem_for(path, used), files, out_dir);
      continue;
    }
    json j;
    {
      std::ifstream f(path);
      try {
        j = json::parse(f);
      } catch (const json::exception& e) {
        throw Error(in + ": " + e.what());
      }
    }
    if (j.contains("function_space") || j.contains("parameter_space") || j.contains("checkpoints")) {
      export_projection(j, path, stem_for(path, used), files, out_dir);
    } else if (j.contains("checkpoint")) {
      if (j.contains("ppl")) {
        for (const auto& [s, v] : j["ppl"].items()) ppl_splits.insert(s);
      }
      j["__source"] = in;
      reports.push_back(std::move(j));
    } else {
      throw Error(in + " is neither a trace, a probe report nor a projection report");
    }
  }

  if (!reports.empty()) {
    std::ostringstream csv;
    csv << "report,checkpoint,epoch";
    for (const auto& s : ppl_splits) csv << ",ppl_" << s;
    csv << ",sensitivity,drop_increase,shuffle_increase,bleu2,bleu3,bigram_entropy,trigram_entropy,max_ratio,errors\n";
    for (const auto& r : reports) {
      csv << csv_field(r["__source"].get<std::string>()) << "," << csv_field(r.at("checkpoint").get<std::string>()) << ","
          << get_or_blank(r, {"epoch"});
      for (const auto& s : ppl_splits) csv << "," << get_or_blank(r, {"ppl", s});
      std::string errors;
      const json errs = r.value("errors", json::object());
      for (const auto& [probe, msg] : errs.items()) {
        errors += (errors.empty() ? "" : "; ") + probe + ": " + msg.get<std::string>();
      }
      csv << "," << get_or_blank(r, {"sensitivity", "cell"}) << "," << get_or_blank(r, {"sensitivity", "drop_increase"})
          << "," << get_or_blank(r, {"sensitivity", "shuffle_increase"}) << "," << get_or_blank(r, {"knowledge", "bleu2"})
          << "," << get_or_blank(r, {"knowledge", "bleu3"}) << "," << get_or_blank(r, {"diversity", "bigram_entropy"})
          << "," << get_or_blank(r, {"diversity", "trigram_entropy"}) << ","
          << csv_field(get_or_blank(r, {"diversity", "max_ratio"})) << "," << csv_field(errors) << "\n";
    }
    files[out_dir / "reports.csv"] = csv.str();
  }

  fs::create_directories(out_dir);
  std::vector<fs::path> written;
  for (const auto& [path, content] : files) {
    write_atomic(path, content);
    written.push_back(path);
    log << "wrote " << path.string() << std::endl;
  }
  return written;
}

}  // namespace fgl::cli
