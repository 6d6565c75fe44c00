// apmg: train, evaluate and render adaptive multi-grid volume models.

#include <chrono>
#include <csignal>
#include <pthread.h>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "apmg/decomposition.hpp"
#include "apmg/render.hpp"
#include "apmg/service.hpp"
#include "apmg/trainer.hpp"

namespace fs = std::filesystem;
using namespace apmg;

namespace {

template <class T, std::size_t N>
std::array<T, N> parse_list(const std::string& text, char sep, const char* what) {
  std::array<T, N> out{};
  std::stringstream ss(text);
  std::string item;
  std::size_t i = 0;
  while (std::getline(ss, item, sep)) {
    if (i >= N) throw std::invalid_argument(std::string("too many values for ") + what);
    std::size_t used = 0;
    if constexpr (std::is_integral_v<T>)
      out[i] = static_cast<T>(std::stoll(item, &used));
    else
      out[i] = static_cast<T>(std::stod(item, &used));
    if (used != item.size()) throw std::invalid_argument(std::string("bad number in ") + what);
    ++i;
  }
  if (i != N) throw std::invalid_argument(std::string("expected ") + std::to_string(N) + " values for " + what);
  return out;
}

std::string read_text(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw std::runtime_error("cannot open " + p.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

bool is_manifest(const fs::path& p) { return p.extension() == ".json"; }

struct SynthArgs {
  std::string dims = "64,64,64";
  std::vector<std::string> blobs;
  int random_blobs = 0;
  std::uint64_t seed = 0;
  double background = 0.0;
  std::string out, header;
};

struct TrainArgs {
  std::string data, header, out;
  int grids = 16, features = 1;
  std::string grid_res = "32,32,32";
  int iters = 50'000, batch = 100'000;
  double lr = 0.01, lr_transform = 0.001;
  std::string decomp = "1x1x1";
  int ghost = 1, workers = 1;
  std::uint64_t seed = 0;
  bool no_plateau = false, freeze = false, serial = false;
};

struct EvalArgs {
  std::string model, data, header;
};

struct RenderArgs {
  std::string model, data, header, camera, tf, out, float_dump;
  int width = 0, height = 0, samples = 256;
  std::size_t batch = 1 << 16;
  bool progressive = false;
};

struct ServeArgs {
  std::string root = ".", address = "127.0.0.1", load;
  int port = 0;
};

int run_synth(const SynthArgs& a) {
  SynthSpec spec;
  spec.dims = parse_list<int, 3>(a.dims, ',', "--dims");
  for (const auto& b : a.blobs) {
    const auto v = parse_list<double, 5>(b, ',', "--blob");
    spec.blobs.push_back({{v[0], v[1], v[2]}, {v[3], v[3], v[3]}, v[4]});
  }
  spec.random_blobs = a.random_blobs;
  spec.seed = a.seed;
  spec.background = a.background;
  const Volume v = synth_volume(spec);
  save_volume(a.out, a.header, v);
  std::cout << "wrote " << a.out << " (" << v.width() << "x" << v.height() << "x" << v.depth() << ", range ["
            << v.vmin() << ", " << v.vmax() << "])\n";
  return 0;
}

int run_train(const TrainArgs& a) {
  // Validate everything before touching the output directory.
  const Volume volume = load_volume(a.data, a.header);
  ModelConfig mc;
  mc.grids = a.grids;
  mc.channels = a.features;
  mc.resolution = parse_list<int, 3>(a.grid_res, ',', "--grid-res");
  mc.seed = a.seed;
  mc.validate();
  TrainConfig tc;
  tc.iterations = a.iters;
  tc.batch_size = a.batch;
  tc.lr_main = a.lr;
  tc.lr_transform = a.lr_transform;
  tc.plateau_enabled = !a.no_plateau;
  tc.freeze_transforms = a.freeze;
  tc.seed = a.seed;
  tc.exec = a.serial ? Exec::serial : Exec::parallel;
  tc.validate();
  const auto grid = parse_list<int, 3>(a.decomp, 'x', "--decomp");
  const DecompositionPlan plan = plan_partition(volume.dims(), grid[0], grid[1], grid[2], a.ghost);

  const auto t0 = std::chrono::steady_clock::now();
  double score = 0.0;
  if (plan.brick_count() == 1) {
    Model model = init_model(mc);
    fit_range(model, volume);
    const TrainLog log = train_single(model, volume, tc);
    fs::create_directories(a.out);
    save_model(fs::path(a.out) / "model.apmg", model);
    std::ofstream lf(fs::path(a.out) / "train_log.jsonl");
    log.write_jsonl(lf);
    score = psnr(model, volume, tc.exec);
  } else {
    const DecomposedTraining res = train_decomposed(volume, plan, mc, tc, a.workers, fs::path(a.out));
    score = psnr(DecomposedModel(plan, res.models), volume, tc.exec);
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  std::cout << std::fixed << std::setprecision(4) << "psnr " << score << " dB\nwall " << secs << " s\n";
  return 0;
}

int run_eval(const EvalArgs& a) {
  const Volume volume = load_volume(a.data, a.header);
  double score;
  if (is_manifest(a.model)) {
    score = psnr(DecomposedModel::load(a.model), volume);
  } else {
    score = psnr(load_model(a.model), volume);
  }
  std::cout << std::fixed << std::setprecision(6) << "psnr " << score << " dB\n";
  return 0;
}

std::unique_ptr<Field> open_field(const std::string& model, const std::string& data, const std::string& header) {
  if (!model.empty()) {
    if (is_manifest(model)) return std::make_unique<DecomposedField>(DecomposedModel::load(model));
    return std::make_unique<ModelField>(load_model(model));
  }
  if (data.empty() || header.empty()) throw std::invalid_argument("render needs --model or --data/--header");
  return std::make_unique<VolumeField>(load_volume(data, header));
}

int run_render(const RenderArgs& a) {
  const auto field = open_field(a.model, a.data, a.header);
  RenderRequest req;
  if (!a.camera.empty()) req.camera = parse_camera(read_text(a.camera));
  if (a.width > 0) req.camera.width = a.width;
  if (a.height > 0) req.camera.height = a.height;
  req.camera.validate();
  if (!a.tf.empty()) req.tf = parse_transfer_function(read_text(a.tf));
  req.config.samples_per_ray = a.samples;
  req.config.batch_size = a.batch;
  req.config.validate();

  Image img;
  if (a.progressive) {
    img = render_progressive(*field, req.camera, req.tf, req.config, {}).image;
  } else {
    img = render_frame(*field, req.camera, req.tf, req.config);
  }
  write_png(a.out, img);
  if (!a.float_dump.empty()) write_float_dump(a.float_dump, img);
  std::cout << "wrote " << a.out << '\n';
  return 0;
}

int run_serve(const ServeArgs& a) {
  ServiceOptions opts;
  opts.root = a.root;
  opts.address = a.address;
  int port = a.port;
  if (port == 0) {
    const char* env = std::getenv("APMG_PORT");
    port = env ? std::atoi(env) : 8080;
  }
  if (port < 1 || port > 65535) throw std::invalid_argument("port out of range");
  opts.port = static_cast<unsigned short>(port);
  Service service(opts);
  if (!a.load.empty()) service.load(a.load);

  // Block the stop signals everywhere and take them on a dedicated thread.
  sigset_t stop_signals;
  sigemptyset(&stop_signals);
  sigaddset(&stop_signals, SIGINT);
  sigaddset(&stop_signals, SIGTERM);
  pthread_sigmask(SIG_BLOCK, &stop_signals, nullptr);
  const unsigned short bound = service.start();
  std::cout << "listening on " << a.address << ":" << bound << std::endl;
  int sig = 0;
  sigwait(&stop_signals, &sig);
  service.stop();
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Adaptive multi-grid volume models"};
  app.require_subcommand(1);

  SynthArgs sa;
  auto* synth = app.add_subcommand("synth", "Write a synthetic gaussian-blob volume");
  synth->add_option("--dims", sa.dims, "W,H,D");
  synth->add_option("--blob", sa.blobs, "cx,cy,cz,sigma,amplitude (repeatable)");
  synth->add_option("--random-blobs", sa.random_blobs);
  synth->add_option("--seed", sa.seed);
  synth->add_option("--background", sa.background);
  synth->add_option("--out", sa.out, "raw output")->required();
  synth->add_option("--header", sa.header, "JSON header output")->required();

  TrainArgs ta;
  auto* train = app.add_subcommand("train", "Fit a model or a brick decomposition");
  train->add_option("--data", ta.data)->required();
  train->add_option("--header", ta.header)->required();
  train->add_option("--out", ta.out)->required();
  train->add_option("--grids", ta.grids);
  train->add_option("--grid-res", ta.grid_res, "D,H,W");
  train->add_option("--features", ta.features);
  train->add_option("--iters", ta.iters);
  train->add_option("--batch", ta.batch);
  train->add_option("--lr", ta.lr);
  train->add_option("--lr-transform", ta.lr_transform);
  train->add_option("--decomp", ta.decomp, "IxJxK");
  train->add_option("--ghost", ta.ghost);
  train->add_option("--workers", ta.workers);
  train->add_option("--seed", ta.seed);
  train->add_flag("--no-plateau", ta.no_plateau);
  train->add_flag("--freeze-transforms", ta.freeze);
  train->add_flag("--serial", ta.serial, "Run kernels on one thread");

  EvalArgs ea;
  auto* eval = app.add_subcommand("eval", "Print data-space PSNR against a volume");
  eval->add_option("--model", ea.model, "model.apmg or manifest.json")->required();
  eval->add_option("--data", ea.data)->required();
  eval->add_option("--header", ea.header)->required();

  RenderArgs ra;
  auto* render = app.add_subcommand("render", "Render a model or volume to PNG");
  render->add_option("--model", ra.model, "model.apmg or manifest.json");
  render->add_option("--data", ra.data);
  render->add_option("--header", ra.header);
  render->add_option("--camera", ra.camera, "camera JSON");
  render->add_option("--tf", ra.tf, "transfer function JSON");
  render->add_option("--width", ra.width);
  render->add_option("--height", ra.height);
  render->add_option("--samples", ra.samples);
  render->add_option("--batch", ra.batch);
  render->add_flag("--progressive", ra.progressive);
  render->add_option("--out", ra.out)->required();
  render->add_option("--float-dump", ra.float_dump);

  ServeArgs va;
  auto* serve = app.add_subcommand("serve", "Run the HTTP/WebSocket service");
  serve->add_option("--root", va.root, "directory of loadable artifacts");
  serve->add_option("--address", va.address);
  serve->add_option("--port", va.port, "defaults to $APMG_PORT or 8080");
  serve->add_option("--load", va.load, "artifact to load at startup");

  CLI11_PARSE(app, argc, argv);
  try {
    if (*synth) return run_synth(sa);
    if (*train) return run_train(ta);
    if (*eval) return run_eval(ea);
    if (*render) return run_render(ra);
    if (*serve) return run_serve(va);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 1;
}
