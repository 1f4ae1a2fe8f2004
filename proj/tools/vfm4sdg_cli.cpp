// vfm4sdg: command-line front end for relational distillation losses,
// prototype banks, query enhancement and detection error analysis.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "vfm4sdg/run_config.hpp"
#include "vfm4sdg/vfm4sdg.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace vfm4sdg;

namespace {

constexpr const char* kModule = "cli";

std::string fmt_real(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.10g", v);
    return buf;
}

void emit_json(const json& report, const std::string& out_path) {
    if (!out_path.empty()) write_text_file(out_path, report.dump(2) + "\n");
}

// C x H x W maps from a 3-D tensor or a B x C x H x W batch.
std::vector<Tensor> split_maps(const Tensor& t, const std::string& what) {
    if (t.ndim() == 3) return {t};
    if (t.ndim() != 4) {
        throw DimensionError(kModule, what + " must be C x H x W or B x C x H x W, got " + shape_str(t.shape()));
    }
    const std::size_t b = t.dim(0), per = t.size() / b;
    std::vector<Tensor> out;
    for (std::size_t i = 0; i < b; ++i) {
        auto v = t.values().subspan(i * per, per);
        out.emplace_back(Shape{t.dim(1), t.dim(2), t.dim(3)}, std::vector<double>(v.begin(), v.end()));
    }
    return out;
}

std::vector<Tensor> split_tokens(const Tensor& t) {
    if (t.ndim() == 2) return {t};
    if (t.ndim() != 3) throw DimensionError(kModule, "tokens must be T x C or B x T x C, got " + shape_str(t.shape()));
    const std::size_t b = t.dim(0), per = t.size() / b;
    std::vector<Tensor> out;
    for (std::size_t i = 0; i < b; ++i) {
        auto v = t.values().subspan(i * per, per);
        out.emplace_back(Shape{t.dim(1), t.dim(2)}, std::vector<double>(v.begin(), v.end()));
    }
    return out;
}

std::vector<LevelShape> parse_level_shapes(const std::string& spec) {
    std::vector<LevelShape> out;
    std::stringstream ss(spec);
    std::string item;
    while (std::getline(ss, item, ',')) {
        const auto x = item.find('x');
        try {
            if (x == std::string::npos) throw std::invalid_argument(item);
            out.push_back({std::stoul(item.substr(0, x)), std::stoul(item.substr(x + 1))});
        } catch (const std::exception&) {
            throw ContractError(kModule, "bad level shape '" + item + "', expected HxW");
        }
    }
    return out;
}

// ---------------------------------------------------------------------------

struct DistillArgs {
    std::vector<std::string> students;
    std::string tokens;
    std::string level_shapes;
    std::string teacher;
    double det_loss = 0.0;
    std::vector<double> sweep;
    std::string out;
};

int cmd_distill_loss(const RunConfig& cfg, const DistillArgs& a) {
    cfg.validate();
    const std::vector<Tensor> teachers = split_maps(read_tensor(a.teacher), "teacher");

    std::vector<FeaturePyramid> pyramids(teachers.size());
    if (!a.tokens.empty()) {
        const auto shapes = parse_level_shapes(a.level_shapes);
        const auto batch = split_tokens(read_tensor(a.tokens));
        if (batch.size() != teachers.size()) throw DimensionError(kModule, "token batch and teacher batch differ in size");
        for (std::size_t b = 0; b < batch.size(); ++b) pyramids[b] = reconstruct_pyramid(batch[b], shapes);
    } else {
        if (a.students.empty()) throw ContractError(kModule, "give --student files or --tokens with --level-shapes");
        std::vector<std::vector<FeatureLevel>> levels(teachers.size());
        for (std::size_t l = 0; l < a.students.size(); ++l) {
            const auto maps = split_maps(read_tensor(a.students[l]), "student level " + std::to_string(l));
            if (maps.size() != teachers.size()) {
                throw DimensionError(kModule, "student level " + std::to_string(l) + " batch size " +
                                                  std::to_string(maps.size()) + " differs from teacher batch size " +
                                                  std::to_string(teachers.size()));
            }
            for (std::size_t b = 0; b < maps.size(); ++b) levels[b].push_back({static_cast<int>(l), maps[b]});
        }
        for (std::size_t b = 0; b < levels.size(); ++b) pyramids[b] = FeaturePyramid(std::move(levels[b]));
    }
    std::vector<TeacherFeature> teacher_features;
    for (const auto& t : teachers) teacher_features.push_back({t, a.teacher});

    const CsrpdResult res = csrpd_loss_batch(pyramids, teacher_features, cfg.levels, cfg.beta);
    const double csrpd = res.total.item();
    const double total = combine_losses(a.det_loss, csrpd, cfg.lambda);

    json per_level = json::array();
    for (const auto& [l, v] : res.per_level) {
        std::cout << "level " << l << ": " << fmt_real(v) << "\n";
        per_level.push_back({{"level", l}, {"loss", v}});
    }
    std::cout << "csrpd_loss: " << fmt_real(csrpd) << "\n"
              << "lambda: " << fmt_real(cfg.lambda) << "  det_loss: " << fmt_real(a.det_loss)
              << "  total_loss: " << fmt_real(total) << "\n";

    json report{{"csrpd_loss", csrpd},   {"per_level", per_level},   {"beta", cfg.beta}, {"lambda", cfg.lambda},
                {"det_loss", a.det_loss}, {"total_loss", total}, {"batch_size", pyramids.size()}};
    if (!a.sweep.empty()) {
        json sweep = json::array();
        std::cout << "lambda sweep:\n";
        for (double lam : a.sweep) {
            const double weighted = combine_losses(0.0, csrpd, lam);
            const double combined = combine_losses(a.det_loss, csrpd, lam);
            std::cout << "  lambda " << fmt_real(lam) << ": weighted " << fmt_real(weighted) << "  total "
                      << fmt_real(combined) << "\n";
            sweep.push_back({{"lambda", lam}, {"weighted", weighted}, {"total_loss", combined}});
        }
        report["sweep"] = sweep;
    }
    emit_json(report, a.out);
    return 0;
}

// ---------------------------------------------------------------------------

struct PrototypeArgs {
    std::string features_dir;
    std::string annotations;
    std::string out;
    std::string report;
};

Tensor as_single_map(const Tensor& t, const std::string& what) {
    auto maps = split_maps(t, what);
    if (maps.size() != 1) throw DimensionError(kModule, what + " holds a batch of " + std::to_string(maps.size()) + " maps");
    return maps.front();
}

int cmd_build_prototypes(const PrototypeArgs& a) {
    const AnnotationSet set = parse_annotations(a.annotations);
    for (const auto& w : set.warnings) std::cerr << "warning: " << w << "\n";
    std::map<ImageId, TeacherFeature> features;
    for (const auto& ann : set.annotations) {
        if (features.count(ann.image_id)) continue;
        const fs::path p = fs::path(a.features_dir) / (std::to_string(ann.image_id) + ".vfmt");
        if (!fs::exists(p)) continue;  // reported by build_bank as a lookup error
        features.emplace(ann.image_id, TeacherFeature{as_single_map(read_tensor(p), p.string()), p.string()});
    }
    const PrototypeBank bank = build_bank(features, set.annotations, set.images);
    save_bank(a.out, bank);

    std::map<CategoryId, std::string> names;
    for (const auto& c : set.categories) names[c.id] = c.name;
    std::cout << "categories: " << bank.size() << "  channels: " << bank.channels() << "\n";
    json per = json::array();
    for (std::size_t i = 0; i < bank.size(); ++i) {
        const auto id = bank.category_ids()[i];
        std::printf("  %-12s id=%-4lld instances=%zu\n", names[id].c_str(), static_cast<long long>(id),
                    bank.instance_counts()[i]);
        per.push_back({{"category_id", id}, {"name", names[id]}, {"instances", bank.instance_counts()[i]}});
    }
    std::fflush(stdout);
    emit_json(json{{"num_categories", bank.size()}, {"channels", bank.channels()}, {"categories", per},
                   {"bank", a.out}},
              a.report);
    return 0;
}

// ---------------------------------------------------------------------------

struct EnhanceArgs {
    std::string queries;
    std::string bank;
    std::string teacher;
    std::string params;
    std::string save_params;
    std::string out;
    std::string report;
};

int cmd_enhance_queries(const RunConfig& cfg, const EnhanceArgs& a) {
    cfg.validate();
    const Tensor q = read_tensor(a.queries);
    if (q.ndim() != 2) throw DimensionError(kModule, "queries must be N_q x C_q, got " + shape_str(q.shape()));
    const PrototypeBank bank = load_bank(a.bank);
    const TeacherFeature teacher{as_single_map(read_tensor(a.teacher), "teacher"), a.teacher};

    EnhancerParams params = a.params.empty() ? init_enhancer(teacher.channels(), q.dim(1), cfg.heads, cfg.seed)
                                             : load_params(a.params);
    if (!a.save_params.empty()) save_params(a.save_params, params);

    const QuerySet out = scpqe({q, QueryStage::Initial}, bank, teacher, params);
    write_tensor(a.out, out.queries.detach());

    std::cout << "queries: " << shape_str(q.shape()) << " -> " << shape_str(out.queries.shape()) << "\n"
              << "prototypes: " << bank.size() << "  teacher tokens: " << teacher.height() * teacher.width()
              << "  heads: " << params.heads() << "\n";
    double sq = 0.0;
    for (double v : out.queries.values()) sq += v * v;
    emit_json(json{{"input_shape", q.shape()},
                   {"output_shape", out.queries.shape()},
                   {"stage", to_string(out.stage)},
                   {"heads", params.heads()},
                   {"seed", cfg.seed},
                   {"params", a.params.empty() ? json("seeded-init") : json(a.params)},
                   {"num_prototypes", bank.size()},
                   {"teacher_tokens", teacher.height() * teacher.width()},
                   {"output_sum_squares", sq}},
              a.report);
    return 0;
}

// ---------------------------------------------------------------------------

struct EvalArgs {
    std::string gt;
    std::string dets;
    std::vector<std::string> domains;
    std::string out;
};

std::vector<Detection> load_detections(const std::string& path) {
    DetectionList d = parse_detections(path);
    for (const auto& w : d.warnings) std::cerr << "warning: " << w << "\n";
    return d.detections;
}

AnnotationSet load_annotations(const std::string& path) {
    AnnotationSet set = parse_annotations(path);
    for (const auto& w : set.warnings) std::cerr << "warning: " << w << "\n";
    return set;
}

int cmd_eval_map(const RunConfig& cfg, const EvalArgs& a) {
    cfg.validate();
    const AnnotationSet set = load_annotations(a.gt);
    const auto dets = load_detections(a.dets);
    const MapReport m = evaluate_map(dets, set.annotations, cfg.iou_threshold);
    std::cout << format_map_table(m);
    json report = to_json(m);
    report["iou_threshold"] = cfg.iou_threshold;
    emit_json(report, a.out);
    return 0;
}

int cmd_analyze_errors(const RunConfig& cfg, const EvalArgs& a) {
    cfg.validate();
    const AnnotationSet set = load_annotations(a.gt);
    const auto dets = load_detections(a.dets);

    std::map<ImageId, std::string> domain_of;
    for (const auto& im : set.images) domain_of[im.id] = im.domain.empty() ? "all" : im.domain;
    std::map<std::string, DomainInput> by_domain;
    for (const auto& im : set.images) by_domain[domain_of[im.id]].tag = domain_of[im.id];
    for (const auto& g : set.annotations) by_domain[domain_of.at(g.image_id)].ground_truth.push_back(g);
    for (const auto& d : dets) {
        auto it = domain_of.find(d.image_id);
        if (it == domain_of.end()) {
            throw ValidationError(kModule, "detection references unknown image_id " + std::to_string(d.image_id));
        }
        by_domain[it->second].detections.push_back(d);
    }

    std::vector<std::string> order = a.domains;
    if (order.empty()) {
        for (const auto& tag : default_domain_order())
            if (by_domain.count(tag)) order.push_back(tag);
        for (const auto& [tag, _] : by_domain)
            if (std::find(order.begin(), order.end(), tag) == order.end()) order.push_back(tag);
    }
    std::vector<DomainInput> inputs;
    for (const auto& tag : order) {
        auto it = by_domain.find(tag);
        if (it == by_domain.end()) throw LookupError(kModule, "no images tagged with domain '" + tag + "'");
        inputs.push_back(it->second);
    }
    const auto reports = domain_sweep(inputs, {cfg.score_threshold, cfg.iou_threshold});
    std::cout << format_sweep_table(reports);
    json report = sweep_table(reports);
    report["score_threshold"] = cfg.score_threshold;
    report["iou_threshold"] = cfg.iou_threshold;
    emit_json(report, a.out);
    return 0;
}

// ---------------------------------------------------------------------------

int cmd_gradcheck(const RunConfig& cfg, std::size_t instances, const std::string& out) {
    const auto res = run_gradcheck_suite(cfg.seed, instances);
    std::map<std::string, std::pair<double, bool>> by_op;
    std::vector<std::string> op_order;
    for (const auto& c : res.cases) {
        auto [it, fresh] = by_op.try_emplace(c.name, 0.0, true);
        if (fresh) op_order.push_back(c.name);
        it->second.first = std::max(it->second.first, c.report.max_rel_error);
        it->second.second = it->second.second && c.report.pass;
    }
    json ops = json::array();
    for (const auto& name : op_order) {
        const auto& [err, pass] = by_op[name];
        std::printf("%-22s %-4s max_rel_error=%.3e\n", name.c_str(), pass ? "PASS" : "FAIL", err);
        ops.push_back({{"op", name}, {"pass", pass}, {"max_rel_error", err}});
    }
    std::printf("%zu checks over %zu instances: %s (%.2fs)\n", res.cases.size(), instances, res.pass ? "PASS" : "FAIL",
                res.seconds);
    std::fflush(stdout);
    // Elapsed time is left out so reports stay byte-identical across runs.
    emit_json(json{{"seed", cfg.seed}, {"instances", instances}, {"pass", res.pass}, {"ops", ops}}, out);
    if (!res.pass) {
        std::cerr << "ERROR:tensor-core:gradcheck: finite-difference check failed\n";
        return 1;
    }
    return 0;
}

void add_common(CLI::App* cmd, RunConfig& cfg, std::initializer_list<const char*> flags) {
    for (std::string f : flags) {
        if (f == "lambda") cmd->add_option("--lambda", cfg.lambda, "Distillation weight")->capture_default_str();
        if (f == "levels") {
            cmd->add_option("--levels", cfg.levels, "Distilled level indices (comma separated)")
                ->delimiter(',')
                ->capture_default_str();
        }
        if (f == "beta") cmd->add_option("--beta", cfg.beta, "Smooth-L1 knee")->capture_default_str();
        if (f == "heads") cmd->add_option("--heads", cfg.heads, "Attention heads")->capture_default_str();
        if (f == "score") {
            cmd->add_option("--score-threshold", cfg.score_threshold, "Minimum detection score")->capture_default_str();
        }
        if (f == "iou") cmd->add_option("--iou-threshold", cfg.iou_threshold, "Match IoU")->capture_default_str();
        if (f == "seed") cmd->add_option("--seed", cfg.seed, "Seed for parameter initialisation")->capture_default_str();
    }
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"vfm4sdg: relational distillation, query enhancement and detection error analysis"};
    app.require_subcommand(1);
    RunConfig cfg;

    DistillArgs distill;
    auto* c_distill = app.add_subcommand("distill-loss", "Relational distillation loss of student features vs a teacher map");
    c_distill->add_option("--student", distill.students, "Student map per level, in level order (C x H x W or B x C x H x W)");
    c_distill->add_option("--tokens", distill.tokens, "Flattened encoder tokens (T x C or B x T x C)");
    c_distill->add_option("--level-shapes", distill.level_shapes, "Level grids for --tokens, e.g. 8x8,4x4");
    c_distill->add_option("--teacher", distill.teacher, "Teacher feature map")->required();
    c_distill->add_option("--det-loss", distill.det_loss, "Detection loss to combine with")->capture_default_str();
    c_distill->add_option("--lambda-sweep", distill.sweep, "Report the combined loss for each lambda")->delimiter(',');
    c_distill->add_option("--out", distill.out, "JSON report path");
    add_common(c_distill, cfg, {"lambda", "levels", "beta"});

    PrototypeArgs protos;
    auto* c_protos = app.add_subcommand("build-prototypes", "Build a category prototype bank from teacher features");
    c_protos->add_option("--features-dir", protos.features_dir, "Directory of <image_id>.vfmt teacher maps")->required();
    c_protos->add_option("--annotations", protos.annotations, "COCO-layout annotation JSON")->required();
    c_protos->add_option("--out", protos.out, "Bank tensor path (sidecar written to <out>.json)")->required();
    c_protos->add_option("--report", protos.report, "JSON summary path");

    EnhanceArgs enhance;
    auto* c_enhance = app.add_subcommand("enhance-queries", "Run prototype and teacher cross-attention on decoder queries");
    c_enhance->add_option("--queries", enhance.queries, "Query tensor N_q x C_q")->required();
    c_enhance->add_option("--bank", enhance.bank, "Prototype bank")->required();
    c_enhance->add_option("--teacher", enhance.teacher, "Teacher map C_t x H_t x W_t")->required();
    c_enhance->add_option("--params", enhance.params, "Parameter directory (manifest.json); seeded init if absent");
    c_enhance->add_option("--save-params", enhance.save_params, "Write the parameters used to this directory");
    c_enhance->add_option("--out", enhance.out, "Enhanced query tensor path")->required();
    c_enhance->add_option("--report", enhance.report, "JSON summary path");
    add_common(c_enhance, cfg, {"heads", "seed"});

    EvalArgs eval;
    auto* c_eval = app.add_subcommand("eval-map", "Per-class AP and mAP at IoU 0.5");
    c_eval->add_option("--gt", eval.gt, "Ground-truth annotation JSON")->required();
    c_eval->add_option("--dets", eval.dets, "Detection results JSON")->required();
    c_eval->add_option("--out", eval.out, "JSON report path");
    add_common(c_eval, cfg, {"iou"});

    EvalArgs errors;
    auto* c_errors = app.add_subcommand("analyze-errors", "False-negative / false-positive / confusion rates per domain");
    c_errors->add_option("--gt", errors.gt, "Ground-truth annotation JSON (images may carry a 'domain' tag)")->required();
    c_errors->add_option("--dets", errors.dets, "Detection results JSON")->required();
    c_errors->add_option("--domains", errors.domains, "Domain order, mildest shift first")->delimiter(',');
    c_errors->add_option("--out", errors.out, "JSON report path");
    add_common(c_errors, cfg, {"score", "iou"});

    std::size_t instances = 20;
    std::string gc_out;
    auto* c_grad = app.add_subcommand("gradcheck", "Finite-difference check of every differentiable op");
    c_grad->add_option("--instances", instances, "Random instances per op")->capture_default_str();
    c_grad->add_option("--out", gc_out, "JSON report path");
    add_common(c_grad, cfg, {"seed"});

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::string msg = e.what();
        std::replace(msg.begin(), msg.end(), '\n', ' ');
        std::cerr << "ERROR:cli:usage: " << msg << "\n";
        return 2;
    }

    try {
        if (*c_distill) return cmd_distill_loss(cfg, distill);
        if (*c_protos) return cmd_build_prototypes(protos);
        if (*c_enhance) return cmd_enhance_queries(cfg, enhance);
        if (*c_eval) return cmd_eval_map(cfg, eval);
        if (*c_errors) return cmd_analyze_errors(cfg, errors);
        if (*c_grad) return cmd_gradcheck(cfg, instances, gc_out);
    } catch (const Error& e) {
        std::string msg = e.what();
        std::replace(msg.begin(), msg.end(), '\n', ' ');
        std::cerr << e.tag() << ": " << msg << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "ERROR:cli:internal: " << e.what() << "\n";
        return 1;
    }
    return 1;
}
