// vilod command-line entry point.

#include "vilod/dataset_io.hpp"
#include "vilod/error.hpp"
#include "vilod/persistence.hpp"
#include "vilod/projection.hpp"
#include "vilod/protocol.hpp"
#include "vilod/service.hpp"
#include "vilod/synthetic_world.hpp"
#include "vilod/uncertainty.hpp"
#include "vilod/workflow.hpp"

#include <CLI11.hpp>

#include <csignal>
#include <cstdlib>
#include <iostream>
#include <sstream>

using namespace vilod;
namespace fs = std::filesystem;

namespace {

// A dataset directory as written by make-synthetic: classes.txt, the split
// folders, embeddings.txt and embedding_ids.txt.
std::shared_ptr<SessionInputs> load_inputs(const fs::path& root) {
  auto in = std::make_shared<SessionInputs>();
  in->registry = load_dataset_manifest(root);
  in->labels = load_ground_truth(in->registry);
  in->embeddings = load_embeddings(root / "embeddings.txt", root / "embedding_ids.txt");
  return in;
}

SyntheticWorldView view_of(const SessionInputs& in) {
  SyntheticWorldView v;
  v.truth = in.labels;
  for (const auto& id : in.registry.ids(Split::TrainPool)) v.truth.try_emplace(id);
  v.validation = in.registry.ids(Split::Validation);
  v.num_classes = in.registry.classes().size();
  return v;
}

std::size_t take_size(KeyValues& kv, const char* key, std::size_t fallback) {
  const auto it = kv.find(key);
  if (it == kv.end()) return fallback;
  const auto v = std::stoull(it->second);
  kv.erase(it);
  return v;
}

std::string take(KeyValues& kv, const char* key, std::string fallback = {}) {
  const auto it = kv.find(key);
  if (it == kv.end()) return fallback;
  auto v = it->second;
  kv.erase(it);
  return v;
}

// The backend used for simulations and serving: a remote detector when an
// address is given, otherwise the synthetic one over the dataset's labels.
struct Backend {
  std::unique_ptr<DetectorBackend> detector;

  Backend(const std::string& address, const SessionInputs& in, const fs::path& manifest_dir,
          std::optional<SyntheticWorldView> view = std::nullopt) {
    if (!address.empty()) {
      fs::create_directories(manifest_dir);
      detector = std::make_unique<protocol::RemoteDetector>(address, manifest_dir);
    } else {
      const auto num_classes = in.registry.classes().size();
      detector = std::make_unique<SyntheticDetector>(view ? *view : view_of(in), default_skill(num_classes));
    }
  }
};

int simulate(const std::string& strategy, const fs::path& config_path, const fs::path& out,
             const std::optional<fs::path>& replay_file, const std::optional<fs::path>& selections_out) {
  auto kv = parse_key_values(read_text_file(config_path));
  const auto config = session_config_from(kv);
  const auto dataset = take(kv, "dataset");
  const auto address = take(kv, "detector", std::getenv("VILOD_DETECTOR_ADDR") ? std::getenv("VILOD_DETECTOR_ADDR") : "");
  const auto filter = take(kv, "uncertainty_filter", "has_boxes");

  WorldOptions wo;
  wo.pool = take_size(kv, "synthetic_pool", wo.pool);
  wo.validation = take_size(kv, "synthetic_validation", wo.validation);
  wo.test = take_size(kv, "synthetic_test", wo.test);
  wo.dim = take_size(kv, "synthetic_dim", wo.dim);
  wo.seed = take_size(kv, "synthetic_seed", wo.seed);
  if (!kv.empty()) throw Error(Errc::InvalidArgument, "unknown config key '" + kv.begin()->first + "'");

  std::shared_ptr<const SessionInputs> inputs;
  std::optional<SyntheticWorldView> view;
  if (dataset.empty()) {
    const auto world = make_synthetic_world(wo);
    inputs = simulation_inputs(world);
    view = world.view();
  } else {
    inputs = load_inputs(dataset);
  }
  Backend backend(address, *inputs, out.parent_path().empty() ? fs::path("manifests") : out.parent_path() / "manifests", view);

  SelectionPolicy policy;
  policy.kind = *parse_policy(strategy);
  if (policy.kind == PolicyKind::UncertaintyFiltered) {
    if (filter == "has_boxes") {
      policy.accept = [inputs](std::string_view id) {
        const auto it = inputs->labels.find(id);
        return it != inputs->labels.end() && !it->second.empty();
      };
    } else if (filter == "all") {
      policy.accept = [](std::string_view) { return true; };
    } else {
      throw Error(Errc::InvalidArgument, "uncertainty_filter must be has_boxes or all");
    }
  }
  if (policy.kind == PolicyKind::Replay) {
    if (!replay_file) throw Error(Errc::InvalidArgument, "--replay-file is required for replay");
    policy.replay_ids = parse_id_list(read_text_file(*replay_file));
  }

  const auto result = run_scripted_strategy(policy, config, inputs, *backend.detector);
  write_text_file(out, trajectory_to_csv(result.trajectory));
  if (selections_out) {
    std::string text;
    for (std::size_t t = 0; t < result.selections.size(); ++t) {
      text += "# iteration " + std::to_string(t + 1) + "\n";
      for (const auto& id : result.selections[t]) text += id + "\n";
    }
    write_text_file(*selections_out, text);
  }
  for (const auto& row : result.trajectory) {
    std::printf("%s iteration %d: mAP50-95 %.4f  mAP50 %.4f  P %.4f  R %.4f\n", row.strategy.c_str(), row.iteration,
                row.map50_95, row.map50, row.precision, row.recall);
  }
  if (result.aborted) {
    std::cerr << "vilod: simulation aborted: " << result.error << "\n";
    return 3;
  }
  return 0;
}

std::atomic<bool> g_stop{false};

void wait_for_signal() {
  std::signal(SIGINT, [](int) { g_stop = true; });
  std::signal(SIGTERM, [](int) { g_stop = true; });
  while (!g_stop) std::this_thread::sleep_for(std::chrono::milliseconds(200));
}

std::string env_or(const char* name, std::string fallback) {
  const char* v = std::getenv(name);
  return v && *v ? v : fallback;
}

} // namespace

int main(int argc, char** argv) {
  CLI::App app{"vilod: visual interactive labeling of object detection data"};
  app.require_subcommand(1);

  // simulate
  auto* sim = app.add_subcommand("simulate", "Run a scripted strategy and write its test-set trajectory");
  std::string strategy;
  fs::path config_path, out_path;
  std::optional<fs::path> replay_file, selections_out;
  sim->add_option("--strategy", strategy, "baseline|exploration|uncertainty|balanced|replay")
      ->required()
      ->check(CLI::IsMember({"baseline", "exploration", "uncertainty", "balanced", "replay"}));
  sim->add_option("--config", config_path, "key=value config file")->required()->check(CLI::ExistingFile);
  sim->add_option("--out", out_path, "trajectory CSV")->required();
  sim->add_option("--replay-file", replay_file, "ids to replay, one per line")->check(CLI::ExistingFile);
  sim->add_option("--selections", selections_out, "write the ids picked per iteration");

  // make-synthetic
  auto* mk = app.add_subcommand("make-synthetic", "Write a generated dataset with embeddings");
  fs::path mk_out;
  WorldOptions wo;
  mk->add_option("--out", mk_out)->required();
  mk->add_option("--pool", wo.pool)->capture_default_str();
  mk->add_option("--validation", wo.validation)->capture_default_str();
  mk->add_option("--test", wo.test)->capture_default_str();
  mk->add_option("--dim", wo.dim)->capture_default_str();
  mk->add_option("--seed", wo.seed)->capture_default_str();

  // project
  auto* proj = app.add_subcommand("project", "t-SNE layout of an embedding file");
  fs::path emb_path, ids_path, proj_out;
  TsneOptions topt;
  proj->add_option("--embeddings", emb_path)->required()->check(CLI::ExistingFile);
  proj->add_option("--ids", ids_path)->required()->check(CLI::ExistingFile);
  proj->add_option("--out", proj_out, "CSV image_id,x,y")->required();
  proj->add_option("--perplexity", topt.perplexity)->capture_default_str();
  proj->add_option("--iterations", topt.iterations)->capture_default_str();
  proj->add_option("--seed", topt.seed)->capture_default_str();

  // seed-pool
  auto* seed = app.add_subcommand("seed-pool", "Diversity seed pool from k-means");
  std::size_t k = 20, per = 2;
  std::uint64_t seed_seed = 42;
  seed->add_option("--embeddings", emb_path)->required()->check(CLI::ExistingFile);
  seed->add_option("--ids", ids_path)->required()->check(CLI::ExistingFile);
  seed->add_option("--k", k)->capture_default_str();
  seed->add_option("--per-cluster", per)->capture_default_str();
  seed->add_option("--seed", seed_seed)->capture_default_str();

  // heatmap
  auto* heat = app.add_subcommand("heatmap", "Uncertainty density grid from a layout and per-image scores");
  fs::path layout_path, scores_path, heat_out;
  std::size_t grid = 128;
  heat->add_option("--projection", layout_path, "CSV image_id,x,y")->required()->check(CLI::ExistingFile);
  heat->add_option("--scores", scores_path, "CSV image_id,avg_conf")->required()->check(CLI::ExistingFile);
  heat->add_option("--out", heat_out)->required();
  heat->add_option("--grid", grid)->capture_default_str();

  // serve
  auto* serve = app.add_subcommand("serve", "HTTP API for the annotation workspace");
  std::string data_root = env_or("VILOD_DATA_ROOT", "");
  std::string detector_addr = env_or("VILOD_DETECTOR_ADDR", "");
  std::string token = env_or("VILOD_TOKEN", "");
  std::string host = "127.0.0.1", user = "annotator";
  fs::path store_root = "vilod-store";
  std::optional<fs::path> serve_config;
  int port = 8080;
  serve->add_option("--data", data_root, "dataset root (VILOD_DATA_ROOT)");
  serve->add_option("--detector", detector_addr, "host:port of a detector server (VILOD_DETECTOR_ADDR)");
  serve->add_option("--token", token, "token of the default user (VILOD_TOKEN)");
  serve->add_option("--user", user, "name of the default user")->capture_default_str();
  serve->add_option("--store", store_root)->capture_default_str();
  serve->add_option("--config", serve_config)->check(CLI::ExistingFile);
  serve->add_option("--host", host)->capture_default_str();
  serve->add_option("--port", port)->capture_default_str();

  // detector-serve
  auto* dserve = app.add_subcommand("detector-serve", "Synthetic detector behind the NDJSON protocol");
  std::string d_host = "127.0.0.1";
  int d_port = 7070;
  std::string d_data = env_or("VILOD_DATA_ROOT", "");
  dserve->add_option("--data", d_data, "dataset root (VILOD_DATA_ROOT)");
  dserve->add_option("--host", d_host)->capture_default_str();
  dserve->add_option("--port", d_port)->capture_default_str();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*sim) return simulate(strategy, config_path, out_path, replay_file, selections_out);

    if (*mk) {
      const auto world = make_synthetic_world(wo);
      write_synthetic_dataset(world, mk_out, wo);
      std::cout << "wrote " << world.registry.images().size() << " images to " << mk_out << "\n";
      return 0;
    }

    if (*proj) {
      const auto emb = load_embeddings(emb_path, ids_path);
      const auto r = tsne_project(emb, topt);
      for (const auto& w : r.warnings) std::cerr << "vilod: " << w << "\n";
      write_text_file(proj_out, projection_to_csv(r.points));
      std::printf("KL %.6f after %zu iterations\n", r.kl_trace.back(), topt.iterations);
      return 0;
    }

    if (*seed) {
      const auto emb = load_embeddings(emb_path, ids_path);
      for (const auto& id : select_seed_pool(emb, k, per, seed_seed)) std::cout << id << "\n";
      return 0;
    }

    if (*heat) {
      const auto layout = projection_from_csv(read_text_file(layout_path));
      std::map<std::string, double, std::less<>> scores;
      std::istringstream in(read_text_file(scores_path));
      for (std::string line; std::getline(in, line);) {
        const auto comma = line.rfind(',');
        if (comma == std::string::npos || line.rfind("image_id,", 0) == 0) continue;
        scores[line.substr(0, comma)] = std::stod(line.substr(comma + 1));
      }
      std::vector<double> weights;
      for (const auto& p : layout) {
        const auto it = scores.find(p.image_id);
        weights.push_back(uncertainty_weight(it == scores.end() ? 0.0 : it->second));
      }
      write_text_file(heat_out, heatmap_to_csv(compute_heatmap(layout, weights, grid, grid)));
      return 0;
    }

    if (*serve) {
      if (data_root.empty()) throw Error(Errc::InvalidArgument, "set --data or VILOD_DATA_ROOT");
      const auto config = serve_config ? parse_session_config(read_text_file(*serve_config)) : SessionConfig{};
      data_root = fs::absolute(data_root).string();
      std::shared_ptr<const SessionInputs> inputs = load_inputs(data_root);
      Backend backend(detector_addr, *inputs, fs::path(store_root) / "manifests");
      EntityStore store(store_root);
      if (!token.empty() && !store.user_by_token(token)) {
        if (store.find_user(user)) throw Error(Errc::InvalidArgument, "user " + user + " exists with another token");
        store.add_user(user, token);
      }
      Service service(config, inputs, data_root, store, *backend.detector);
      HttpServer server(service);
      const int bound = server.start(host, port);
      std::cout << "vilod: serving on http://" << host << ":" << bound << std::endl;
      wait_for_signal();
      server.stop();
      return 0;
    }

    if (*dserve) {
      if (d_data.empty()) throw Error(Errc::InvalidArgument, "set --data or VILOD_DATA_ROOT");
      const auto inputs = load_inputs(d_data);
      SyntheticDetector detector(view_of(*inputs), default_skill(inputs->registry.classes().size()));
      protocol::DetectorServer server(detector);
      const int bound = server.start(d_host, d_port);
      std::cout << "vilod: detector on " << d_host << ":" << bound << std::endl;
      wait_for_signal();
      server.stop();
      return 0;
    }
  } catch (const Error& e) {
    std::cerr << "vilod: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "vilod: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
