#include <json.hpp>

#include "apmg/render.hpp"

namespace apmg {

using json = nlohmann::json;

namespace {

Vec3d vec3(const json& j, const char* key) {
  const json& v = j.at(key);
  if (!v.is_array() || v.size() != 3) throw RenderError(std::string(key) + " must be a 3-vector");
  return {v[0].get<double>(), v[1].get<double>(), v[2].get<double>()};
}

Camera camera_from(const json& j) {
  Camera c;
  c.eye = vec3(j, "eye");
  c.look_at = vec3(j, "look_at");
  if (j.contains("up")) c.up = vec3(j, "up");
  c.fov_deg = j.value("fov", c.fov_deg);
  c.width = j.value("width", c.width);
  c.height = j.value("height", c.height);
  c.validate();
  return c;
}

// Rescales positions so the first point sits at 0 and the last at 1.
template <class P>
void normalize_positions(std::vector<P>& pts) {
  if (pts.size() < 2) {
    for (auto& p : pts) p.pos = 0.0;
    return;
  }
  const double lo = pts.front().pos, hi = pts.back().pos;
  if (!(hi > lo)) throw RenderError("colormap control points span an empty range");
  for (auto& p : pts) p.pos = (p.pos - lo) / (hi - lo);
  pts.back().pos = 1.0;
}

TransferFunction tf_from(const json& src) {
  const json& j = src.is_array() && src.size() == 1 ? src[0] : src;
  if (!j.is_object()) throw RenderError("transfer function must be an object");
  TransferFunction tf;
  if (j.contains("RGBPoints")) {
    const auto flat = j["RGBPoints"].get<std::vector<double>>();
    if (flat.empty() || flat.size() % 4 != 0) throw RenderError("RGBPoints must hold x,r,g,b quadruples");
    for (std::size_t i = 0; i < flat.size(); i += 4) tf.colors.push_back({flat[i], flat[i + 1], flat[i + 2], flat[i + 3]});
    normalize_positions(tf.colors);
    if (j.contains("Points")) {
      const auto pts = j["Points"].get<std::vector<double>>();
      if (pts.empty() || pts.size() % 4 != 0) throw RenderError("Points must hold x,a,mid,sharpness quadruples");
      for (std::size_t i = 0; i < pts.size(); i += 4) tf.opacity.push_back({pts[i], pts[i + 1]});
      normalize_positions(tf.opacity);
    } else {
      tf.opacity = {{0.0, 0.0}, {1.0, 1.0}};
    }
  } else {
    for (const auto& p : j.at("colors")) {
      if (!p.is_array() || p.size() != 4) throw RenderError("color points are [x,r,g,b]");
      tf.colors.push_back({p[0].get<double>(), p[1].get<double>(), p[2].get<double>(), p[3].get<double>()});
    }
    for (const auto& p : j.at("opacity")) {
      if (!p.is_array() || p.size() != 2) throw RenderError("opacity points are [x,a]");
      tf.opacity.push_back({p[0].get<double>(), p[1].get<double>()});
    }
  }
  if (j.contains("window")) {
    const json& w = j["window"];
    if (!w.is_array() || w.size() != 2) throw RenderError("window must be [lo,hi]");
    tf.window_lo = w[0].get<double>();
    tf.window_hi = w[1].get<double>();
  }
  tf.bake();
  return tf;
}

json tf_json(const TransferFunction& tf) {
  json j;
  j["colors"] = json::array();
  for (const auto& c : tf.colors) j["colors"].push_back({c.pos, c.r, c.g, c.b});
  j["opacity"] = json::array();
  for (const auto& o : tf.opacity) j["opacity"].push_back({o.pos, o.alpha});
  j["window"] = {tf.window_lo, tf.window_hi};
  return j;
}

template <class F>
auto guarded(const std::string& text, F&& f) {
  try {
    return f(json::parse(text));
  } catch (const json::exception& e) {
    throw RenderError(std::string("invalid JSON: ") + e.what());
  }
}

}  // namespace

Camera parse_camera(const std::string& text) {
  return guarded(text, [](const json& j) { return camera_from(j); });
}

std::string camera_to_json(const Camera& c) {
  json j;
  j["eye"] = c.eye;
  j["look_at"] = c.look_at;
  j["up"] = c.up;
  j["fov"] = c.fov_deg;
  j["width"] = c.width;
  j["height"] = c.height;
  return j.dump();
}

TransferFunction parse_transfer_function(const std::string& text) {
  return guarded(text, [](const json& j) { return tf_from(j); });
}

std::string transfer_function_to_json(const TransferFunction& tf) { return tf_json(tf).dump(); }

RenderRequest parse_render_request(const std::string& text) {
  return guarded(text, [](const json& j) {
    if (!j.is_object()) throw RenderError("render request must be an object");
    RenderRequest r;
    r.camera = camera_from(j.at("camera"));
    if (j.contains("transfer_function")) r.tf = tf_from(j["transfer_function"]);
    r.config.samples_per_ray = j.value("samples_per_ray", r.config.samples_per_ray);
    const long long batch = j.value("batch_size", static_cast<long long>(r.config.batch_size));
    if (batch < 1) throw RenderError("batch size must be at least 1");
    r.config.batch_size = static_cast<std::size_t>(batch);
    if (j.contains("background")) {
      const auto bg = j["background"].get<std::vector<float>>();
      if (bg.size() != 4) throw RenderError("background must be RGBA");
      std::copy(bg.begin(), bg.end(), r.config.background.begin());
    }
    if (j.contains("early_exit")) r.config.early_exit = j["early_exit"].get<double>();
    if (j.contains("reference_step")) r.config.reference_step = j["reference_step"].get<double>();
    r.progressive = j.value("progressive", false);
    if (j.contains("request_id")) {
      const json& id = j["request_id"];
      r.request_id = id.is_string() ? id.get<std::string>() : id.dump();
    }
    r.config.validate();
    return r;
  });
}

}  // namespace apmg
