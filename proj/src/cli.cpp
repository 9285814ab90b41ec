#include "maskvid/cli.hpp"

#include <filesystem>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "maskvid/checkpoint.hpp"
#include "maskvid/container.hpp"
#include "maskvid/error.hpp"
#include "maskvid/image_io.hpp"
#include "maskvid/metrics.hpp"
#include "maskvid/pipeline.hpp"

namespace fs = std::filesystem;

namespace maskvid {

namespace {

/// Bad or missing arguments or inputs; maps to exit code 2.
class UsageError : public Error {
public:
    using Error::Error;
};

std::string read_text(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw UsageError("cannot read " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

nlohmann::json read_json(const std::string& path) {
    try {
        return nlohmann::json::parse(read_text(path));
    } catch (const nlohmann::json::exception& e) {
        throw UsageError(path + ": " + e.what());
    }
}

// ---------------------------------------------------------------------------
// dataset gen

struct DatasetArgs {
    int count = 0;
    uint64_t seed = 0;
    std::string out;
    std::string config;
    double test_fraction = 0.0;
};

void cmd_dataset_gen(const DatasetArgs& a) {
    GeneratorConfig gen;
    if (!a.config.empty()) gen = read_json(a.config).get<GeneratorConfig>();
    if (a.count <= 0) throw UsageError("--count must be positive");
    const DatasetManifest m = write_dataset(a.out, a.count, a.seed, gen, a.test_fraction);
    std::cout << "wrote " << m.samples.size() << " samples to " << a.out << "\n";
}

// ---------------------------------------------------------------------------
// train

struct TrainArgs {
    int stage = 0;
    std::string config;
    std::string data;
    std::string out;
    std::string split = "train";
    std::string log;
    std::string resume;
};

void check_training_data(const std::vector<DatasetSample>& samples, StageTag stage) {
    if (samples.empty()) throw UsageError("no training samples found");
    for (const auto& s : samples) {
        if (!s.file.video) throw UsageError("sample " + s.name + " is missing field 'video'");
        if (!s.file.mask) throw UsageError("sample " + s.name + " is missing field 'mask' (mask trajectory)");
        if (!s.prompts) throw UsageError("sample " + s.name + " is missing field 'prompts'");
        if (stage == StageTag::stage2 && s.prompts->local_prompts.empty()) {
            throw UsageError("sample " + s.name + " is missing field 'local_prompts'");
        }
    }
}

void cmd_train(const TrainArgs& a) {
    const StageTag stage = a.stage == 1 ? StageTag::stage1 : StageTag::stage2;
    PipelineConfig config;
    if (!a.config.empty()) config = read_json(a.config).get<PipelineConfig>();
    if (!fs::exists(fs::path(a.data) / "manifest.json")) throw UsageError(a.data + " has no manifest.json");
    const auto samples = load_dataset(a.data, a.split);
    check_training_data(samples, stage);

    TrainOptions opt;
    opt.checkpoint_path = a.out;
    opt.log_path = a.log.empty() ? a.out + ".log.jsonl" : a.log;
    opt.on_step = [](const StepReport& r) {
        if (r.step % 100 == 0) {
            std::cout << "step " << r.step << " loss " << r.loss << " lr " << r.lr << " grad_norm " << r.grad_norm
                      << std::endl;
        }
    };
    std::optional<StageCheckpoint> resume;
    if (!a.resume.empty()) resume = load_checkpoint(a.resume, stage);
    const TrainResult r = train_stage(stage, samples, config, opt, resume ? &*resume : nullptr);
    std::cout << "saved " << stage_name(stage) << " checkpoint at step " << r.checkpoint.step << " to " << a.out
              << "\n";
}

// ---------------------------------------------------------------------------
// generate

struct GenerateArgs {
    std::string image;
    std::string sample;
    std::string data;
    std::string split = "test";
    std::string prompts;
    std::string answer;
    std::string s0;
    std::string ckpt1;
    std::string ckpt2;
    uint64_t seed = 0;
    std::string out;
    bool bypass = false;
    int steps = 0;
    std::optional<double> g_vis;
    std::optional<double> g_txt;
    bool no_render = false;
};

void render_outputs(const std::string& prefix, const std::optional<VideoClip>& video,
                    const std::optional<MaskTrajectory>& mask, const Palette& palette) {
    const auto one = [&](const VideoClip& clip, const std::string& tag) {
        write_png(prefix + "_" + tag + ".png", frame_strip(clip));
        std::vector<Image> frames;
        for (int f = 0; f < clip.frames; ++f) frames.push_back(frame_image(clip, f));
        write_apng(prefix + "_" + tag + ".apng", frames, clip.fps);
    };
    if (video) one(*video, "video");
    if (mask) one(palette_encode(*mask, palette), "mask");
}

void cmd_generate(const GenerateArgs& a) {
    const int sources = !a.image.empty() + !a.sample.empty() + !a.data.empty();
    if (sources != 1) throw UsageError("exactly one of --image, --sample or --data is required");
    if (a.ckpt2.empty()) throw UsageError("--ckpt2 is required");
    if (a.ckpt1.empty() && !a.bypass) throw UsageError("--ckpt1 is required unless --bypass-stage1 is set");

    const StageCheckpoint ck2 = load_checkpoint(a.ckpt2, StageTag::stage2);
    StageCheckpoint ck1;
    if (!a.ckpt1.empty()) ck1 = load_checkpoint(a.ckpt1, StageTag::stage1);

    std::optional<SolverSpec> solver;
    if (a.steps > 0 || a.g_vis || a.g_txt) {
        SolverSpec s = ck2.solver;
        if (a.steps > 0) s.steps = a.steps;
        if (a.g_vis) s.g_vis = *a.g_vis;
        if (a.g_txt) s.g_txt = *a.g_txt;
        solver = s;
    }

    nlohmann::json run{{"seed", a.seed}, {"bypass", a.bypass}, {"stage2", ck2.config}, {"step2", ck2.step}};
    if (!a.ckpt1.empty()) {
        run["stage1"] = ck1.config;
        run["step1"] = ck1.step;
    }
    if (solver) run["solver"] = *solver;
    const std::string hash = config_hash(run);

    struct Job {
        std::string name;
        InferenceRequest request;
    };
    std::vector<Job> jobs;
    const auto with_prompt_overrides = [&](PromptBundle bundle) {
        if (!a.prompts.empty()) bundle = load_prompt_bundle(a.prompts);
        if (!a.answer.empty()) bundle = with_object_prompts(bundle, parse_object_prompts(read_text(a.answer)));
        return bundle;
    };
    const auto from_sample = [&](const std::string& name, const SampleFile& f, std::optional<PromptBundle> p) {
        if (!f.video) throw UsageError("sample " + name + " has no video for the reference frame");
        Job j;
        j.name = name;
        j.request.x0 = f.video->frame(0);
        j.request.scene = f.scene;
        if (f.mask) j.request.s0 = f.mask->frame(0);
        if (!p && f.scene) p = render_prompts(*f.scene);
        if (!p && a.prompts.empty()) throw UsageError("sample " + name + " has no prompts; pass --prompts");
        j.request.prompts = with_prompt_overrides(p.value_or(PromptBundle{}));
        jobs.push_back(std::move(j));
    };

    if (!a.data.empty()) {
        for (const auto& s : load_dataset(a.data, a.split)) from_sample(s.name, s.file, s.prompts);
    } else if (!a.sample.empty()) {
        std::optional<PromptBundle> p;
        const fs::path side = fs::path(a.sample).replace_extension(".prompts.json");
        if (fs::exists(side)) p = load_prompt_bundle(side.string());
        from_sample(fs::path(a.sample).stem().string(), load_sample(a.sample), p);
    } else {
        if (a.s0.empty()) throw UsageError("--image needs --s0 (no segmentation model is available)");
        if (a.prompts.empty() && a.answer.empty()) throw UsageError("--image needs --prompts");
        Job j;
        j.name = fs::path(a.image).stem().string();
        j.request.x0 = image_to_frame(read_png(a.image));
        const SampleFile s0 = load_sample(a.s0);
        if (!s0.mask) throw UsageError(a.s0 + " is missing field 'mask'");
        j.request.s0 = s0.mask->frame(0);
        j.request.scene = s0.scene;
        j.request.prompts = with_prompt_overrides(PromptBundle{});
        jobs.push_back(std::move(j));
    }

    fs::create_directories(a.out);
    for (auto& j : jobs) {
        j.request.seed = a.seed;
        j.request.solver = solver;
        j.request.bypass_stage1 = a.bypass;
        const InferenceResult r = infer(j.request, ck1, ck2);
        SampleFile out;
        out.video = r.x_hat;
        out.mask = r.s_hat;
        out.scene = j.request.scene;
        out.config_hash = hash;
        const std::string base = (fs::path(a.out) / j.name).string();
        save_sample(base + ".mvs", out);
        if (!a.no_render) render_outputs(base, out.video, out.mask, out.palette);
        std::cout << "generated " << base << ".mvs\n";
    }
}

// ---------------------------------------------------------------------------
// eval

struct EvalArgs {
    std::string pred;
    std::string gt;
    std::string report;
    bool force = false;
};

void cmd_eval(const EvalArgs& a) {
    if (!fs::is_directory(a.pred)) throw UsageError(a.pred + " is not a directory");
    if (!fs::is_directory(a.gt)) throw UsageError(a.gt + " is not a directory");
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(a.pred)) {
        if (e.path().extension() == ".mvs") files.push_back(e.path());
    }
    std::sort(files.begin(), files.end());
    if (files.empty()) throw UsageError(a.pred + " contains no .mvs predictions");

    MetricReport report;
    std::set<std::string> hashes;
    for (const auto& p : files) {
        const SampleFile pred = load_sample(p.string());
        const fs::path gt_path = fs::path(a.gt) / p.filename();
        if (!fs::exists(gt_path)) throw Error("no ground truth for " + p.filename().string());
        const SampleFile gt = load_sample(gt_path.string());
        if (!gt.mask || !gt.scene) throw Error(gt_path.string() + " lacks the mask or scene needed for evaluation");
        hashes.insert(pred.config_hash);

        const std::string name = p.stem().string();
        SampleMetrics m;
        m.name = name;
        const MaskTrajectory pred_mask = pred.mask ? *pred.mask : extract_masks_by_color(*pred.video, *gt.scene);
        m.iou = mean_iou(pred_mask, *gt.mask).mean;
        std::string warn;
        m.ad = avg_displacement(pred_mask, &warn);
        if (!warn.empty()) report.warnings.push_back(name + ": " + warn);
        warn.clear();
        const VideoClip clip = pred.video ? *pred.video : palette_encode(pred_mask, pred.palette);
        m.fc = frame_consistency_proxy(clip, &warn);
        if (!warn.empty()) report.warnings.push_back(name + ": " + warn);
        const MaskTrajectory tracked = pred.video ? extract_masks_by_color(*pred.video, *gt.scene) : pred_mask;
        m.cte = centroid_trajectory_error(tracked, *gt.scene);
        report.samples.push_back(m);
    }
    if (hashes.size() > 1 && !a.force) {
        throw Error("predictions come from " + std::to_string(hashes.size()) +
                    " different runs (config hashes); pass --force to evaluate anyway");
    }
    report.config_hash = hashes.size() == 1 ? *hashes.begin() : "mixed";
    report.aggregate();
    const nlohmann::json j = report;
    std::ofstream out(a.report);
    if (!out) throw Error("cannot write " + a.report);
    out << j.dump(2) << "\n";
    std::cout << "mean_iou " << report.mean_iou << " ad " << report.ad << " fc_proxy " << report.fc << " cte "
              << report.cte << " over " << report.samples.size() << " samples\n";
}

// ---------------------------------------------------------------------------
// render

void cmd_render(const std::string& in, const std::string& out) {
    const SampleFile s = load_sample(in);
    render_outputs(out, s.video, s.mask, s.palette);
    std::cout << "rendered " << in << " to " << out << "_*.png/.apng\n";
}

}  // namespace

int run_cli(int argc, char** argv) {
    CLI::App app{"maskvid: two-stage mask-trajectory video generation on synthetic scenes"};
    app.require_subcommand(1);

    auto* dataset = app.add_subcommand("dataset", "Synthetic dataset tools");
    dataset->require_subcommand(1);
    DatasetArgs da;
    auto* gen = dataset->add_subcommand("gen", "Generate a directory of samples with a manifest");
    gen->add_option("--count", da.count, "Number of samples")->required();
    gen->add_option("--seed", da.seed, "Seed of the first sample")->required();
    gen->add_option("--out", da.out, "Output directory")->required();
    gen->add_option("--config", da.config, "Generator config (JSON)");
    gen->add_option("--test-fraction", da.test_fraction, "Fraction of samples in the test split")
        ->check(CLI::Range(0.0, 1.0));

    TrainArgs ta;
    auto* train = app.add_subcommand("train", "Train one stage");
    train->add_option("--stage", ta.stage, "1 or 2")->required()->check(CLI::IsMember({1, 2}));
    train->add_option("--config", ta.config, "Run config (JSON)");
    train->add_option("--data", ta.data, "Dataset directory")->required();
    train->add_option("--out", ta.out, "Checkpoint path")->required();
    train->add_option("--split", ta.split, "Dataset split to train on");
    train->add_option("--log", ta.log, "Training log (JSON lines)");
    train->add_option("--resume", ta.resume, "Checkpoint to continue from");

    GenerateArgs ga;
    auto* generate = app.add_subcommand("generate", "Two-stage sampling");
    generate->add_option("--image", ga.image, "Reference frame (PNG)");
    generate->add_option("--sample", ga.sample, "Reference sample container");
    generate->add_option("--data", ga.data, "Dataset directory (generate for a whole split)");
    generate->add_option("--split", ga.split, "Split used with --data");
    generate->add_option("--prompts", ga.prompts, "Prompt bundle (JSON)");
    generate->add_option("--answer", ga.answer, "Object-prompt answer text replacing the local prompts");
    generate->add_option("--s0", ga.s0, "Container holding the first-frame mask");
    generate->add_option("--ckpt1", ga.ckpt1, "Stage-1 checkpoint");
    generate->add_option("--ckpt2", ga.ckpt2, "Stage-2 checkpoint");
    generate->add_option("--seed", ga.seed, "Sampling seed")->required();
    generate->add_option("--out", ga.out, "Output directory")->required();
    generate->add_flag("--bypass-stage1", ga.bypass, "Use the ground-truth trajectory instead of stage 1");
    generate->add_option("--steps", ga.steps, "Override the sampling step count");
    generate->add_option("--g-vis", ga.g_vis, "Visual guidance scale");
    generate->add_option("--g-txt", ga.g_txt, "Text guidance scale");
    generate->add_flag("--no-render", ga.no_render, "Skip PNG/APNG output");

    EvalArgs ea;
    auto* eval = app.add_subcommand("eval", "Metrics of predictions against ground truth");
    eval->add_option("--pred-dir", ea.pred, "Prediction directory")->required();
    eval->add_option("--gt-dir", ea.gt, "Ground-truth dataset directory")->required();
    eval->add_option("--report", ea.report, "Report path (JSON)")->required();
    eval->add_flag("--force", ea.force, "Accept predictions from several runs");

    std::string render_in, render_out;
    auto* render = app.add_subcommand("render", "PNG frame strips and animated PNGs of a container");
    render->add_option("--in", render_in, "Sample container")->required();
    render->add_option("--out", render_out, "Output path prefix")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    try {
        if (*gen) cmd_dataset_gen(da);
        if (*train) cmd_train(ta);
        if (*generate) cmd_generate(ga);
        if (*eval) cmd_eval(ea);
        if (*render) cmd_render(render_in, render_out);
    } catch (const UsageError& e) {
        std::cerr << "usage error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}

}  // namespace maskvid
